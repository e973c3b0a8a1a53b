//! Built-in scenarios and small builders for simulated agents.
//!
//! * [`disaster_response`]: heterogeneous drones, ground robots and human
//!   responders serving survey, delivery and triage tasks.
//! * [`heavy_tailed`]: one fast-on-average but heavy-tailed agent against
//!   one slower, predictable agent under a tight deadline.

use std::collections::{BTreeMap, BTreeSet};

use crate::agents::{AgentProfile, Linear, OptionTruth, ReportingProfile, ScalarLaw};
use crate::calibration::RecalibrationConfig;
use crate::clearinghouse::{ClearingConfig, Mechanism};
use crate::model::{
    AgentDescriptor, AgentKind, Clause, ConstraintSet, FeatureSource, FeatureValue, MetricLimit,
    OptionSpec, Tier,
};
use crate::risk::RiskConfig;
use crate::simulator::{
    DeadlineLaw, FeatureGen, LearningConfig, Roster, ScenarioConfig, TaskTemplate,
};

pub fn lognormal(median: Linear, sigma: f64) -> ScalarLaw {
    ScalarLaw::LogNormal { median, sigma }
}

/// An option providing `roles` at `cost`.
pub fn option(id: &str, roles: &[&str], cost: f64) -> OptionSpec {
    OptionSpec {
        option_id: id.into(),
        label: id.replace('_', " "),
        initiation: Vec::new(),
        roles_provided: roles.iter().map(|r| r.to_string()).collect(),
        nominal_cost: cost,
        metadata: BTreeMap::new(),
    }
}

/// Ground truth with a time law, a constant success probability and no
/// metrics.
pub fn truth(time: ScalarLaw, success: f64) -> OptionTruth {
    OptionTruth {
        time,
        t_max: f64::INFINITY,
        success: Linear::constant(success),
        metrics: BTreeMap::new(),
    }
}

/// A truthful, never-failing agent offering the given options.
pub fn agent(
    id: &str,
    kind: AgentKind,
    tier: Tier,
    options: Vec<(OptionSpec, OptionTruth)>,
) -> AgentProfile {
    let ground_truth = options
        .iter()
        .map(|(o, t)| (o.option_id.clone(), t.clone()))
        .collect();
    AgentProfile {
        descriptor: AgentDescriptor {
            agent_id: id.into(),
            kind,
            options: options.into_iter().map(|(o, _)| o).collect(),
            roles: BTreeSet::new(),
            state: BTreeMap::new(),
            tier,
        },
        ground_truth,
        reporting: ReportingProfile::Truthful,
        failure_rate: 0.0,
    }
}

fn roles(r: &[&str]) -> BTreeSet<String> {
    r.iter().map(|s| s.to_string()).collect()
}

fn uniform(low: f64, high: f64) -> FeatureGen {
    FeatureGen::Uniform { low, high }
}

/// Survey, supply delivery and medical triage served by three drones, two
/// ground robots and two human responders. Drones are fast but wind
/// sensitive and unavailable above 12 m/s; robots are slow and steady;
/// responders are the only agents able to triage. Deliveries carry a
/// collision-risk limit.
pub fn disaster_response() -> ScenarioConfig {
    let mut agents = Vec::new();
    for (i, reporting) in [
        ReportingProfile::Truthful,
        ReportingProfile::Overconfident {
            gamma: 0.5,
            delta: 0.1,
        },
        ReportingProfile::Truthful,
    ]
    .into_iter()
    .enumerate()
    {
        let mut survey = option("aerial_survey", &["survey"], 2.0);
        let mut drop = option("air_drop", &["delivery"], 3.0);
        let calm = Clause::Below {
            source: FeatureSource::Context,
            feature: "wind".into(),
            value: 12.0,
        };
        survey.initiation.push(calm.clone());
        drop.initiation.push(calm);
        let mut drop_truth = truth(
            lognormal(
                Linear::constant(60.0)
                    .with("distance", 25.0)
                    .with("wind", 6.0),
                0.6,
            ),
            0.95,
        );
        drop_truth.success = Linear::constant(0.97).with("wind", -0.01);
        drop_truth.metrics.insert(
            "collision_risk".into(),
            lognormal(Linear::constant(0.02).with("wind", 0.004), 0.5),
        );
        let mut a = agent(
            &format!("drone-{}", i + 1),
            AgentKind::Robot,
            Tier::Full,
            vec![
                (
                    survey,
                    truth(
                        lognormal(
                            Linear::constant(90.0)
                                .with("distance", 30.0)
                                .with("wind", 8.0),
                            0.5,
                        ),
                        0.97,
                    ),
                ),
                (drop, drop_truth),
            ],
        );
        a.descriptor
            .state
            .insert("battery".into(), FeatureValue::Num(1.0));
        a.reporting = reporting;
        a.failure_rate = 0.05;
        agents.push(a);
    }
    for i in 0..2 {
        let mut deliver = truth(
            lognormal(Linear::constant(240.0).with("distance", 90.0), 0.25),
            0.98,
        );
        deliver.metrics.insert(
            "collision_risk".into(),
            lognormal(Linear::constant(0.01), 0.3),
        );
        let mut a = agent(
            &format!("robot-{}", i + 1),
            AgentKind::Robot,
            Tier::Lite,
            vec![
                (option("ground_delivery", &["delivery"], 1.5), deliver),
                (
                    option("ground_survey", &["survey"], 1.0),
                    truth(
                        lognormal(Linear::constant(300.0).with("distance", 100.0), 0.3),
                        0.95,
                    ),
                ),
            ],
        );
        a.failure_rate = 0.02;
        agents.push(a);
    }
    for i in 0..2 {
        let mut a = agent(
            &format!("medic-{}", i + 1),
            AgentKind::Human,
            Tier::Lite,
            vec![(
                option("triage", &["medical"], 4.0),
                truth(
                    lognormal(Linear::constant(420.0).with("distance", 120.0), 0.4),
                    0.9,
                ),
            )],
        );
        a.reporting = if i == 0 {
            ReportingProfile::Truthful
        } else {
            ReportingProfile::Underconfident {
                gamma: 1.5,
                delta: 0.05,
            }
        };
        agents.push(a);
    }
    let context = |zones: &[&str]| {
        let mut m = BTreeMap::new();
        m.insert("distance".to_string(), uniform(0.5, 5.0));
        m.insert("wind".to_string(), uniform(0.0, 15.0));
        m.insert(
            "zone".to_string(),
            FeatureGen::Choice {
                values: zones.iter().map(|z| z.to_string()).collect(),
            },
        );
        m
    };
    let templates = vec![
        TaskTemplate {
            goal_label: "survey".into(),
            rate_per_hour: 12.0,
            deadline: DeadlineLaw::Uniform {
                low: 400.0,
                high: 900.0,
            },
            constraints: ConstraintSet {
                required_roles: roles(&["survey"]),
                deadline_confidence: 0.3,
                ..Default::default()
            },
            context: context(&["north", "south", "river"]),
        },
        TaskTemplate {
            goal_label: "deliver_supplies".into(),
            rate_per_hour: 10.0,
            deadline: DeadlineLaw::Uniform {
                low: 500.0,
                high: 1200.0,
            },
            constraints: ConstraintSet {
                required_roles: roles(&["delivery"]),
                deadline_confidence: 0.3,
                metric_limits: vec![MetricLimit {
                    metric: "collision_risk".into(),
                    limit: 0.1,
                    confidence: 0.9,
                }],
                resource_demands: BTreeMap::from([("medical_kits".to_string(), 1.0)]),
            },
            context: context(&["north", "south", "river"]),
        },
        TaskTemplate {
            goal_label: "medical_triage".into(),
            rate_per_hour: 4.0,
            deadline: DeadlineLaw::Fixed { value: 1800.0 },
            constraints: ConstraintSet {
                required_roles: roles(&["medical"]),
                deadline_confidence: 0.5,
                ..Default::default()
            },
            context: context(&["north", "south"]),
        },
    ];
    ScenarioConfig {
        name: "disaster_response".into(),
        horizon: 4.0 * 3600.0,
        seed: 1,
        mechanism: Mechanism::RocFull,
        task_templates: templates,
        roster: Roster::Inline(agents),
        clearing: ClearingConfig::default(),
        learning: LearningConfig::default(),
        clear_interval: 10.0,
        repair_time: 1800.0,
        roster_events: Vec::new(),
        resource_pools: BTreeMap::from([("medical_kits".to_string(), 30.0)]),
        max_tasks: None,
    }
}

/// Two agents for one task type with a tight deadline: `gambler` has the
/// lower mean completion time but a heavy right tail, `steady` is slower on
/// average and almost never late.
pub fn heavy_tailed() -> ScenarioConfig {
    let mut gambler = agent(
        "gambler",
        AgentKind::Robot,
        Tier::Full,
        vec![(
            option("respond", &["response"], 1.0),
            truth(lognormal(Linear::constant(30.0), 1.5), 1.0),
        )],
    );
    gambler
        .ground_truth
        .get_mut(&"respond".into())
        .expect("option")
        .t_max = 2000.0;
    let steady = agent(
        "steady",
        AgentKind::Robot,
        Tier::Full,
        vec![(
            option("respond", &["response"], 1.0),
            truth(lognormal(Linear::constant(95.0), 0.05), 1.0),
        )],
    );
    ScenarioConfig {
        name: "heavy_tailed".into(),
        horizon: 4.0 * 3600.0,
        seed: 1,
        mechanism: Mechanism::RocFull,
        task_templates: vec![TaskTemplate {
            goal_label: "respond".into(),
            rate_per_hour: 6.0,
            deadline: DeadlineLaw::Fixed { value: 120.0 },
            constraints: ConstraintSet {
                required_roles: roles(&["response"]),
                ..Default::default()
            },
            context: BTreeMap::new(),
        }],
        roster: Roster::Inline(vec![gambler, steady]),
        clearing: ClearingConfig {
            risk: RiskConfig {
                lambda: 1.0,
                ..Default::default()
            },
            recalibration: RecalibrationConfig::default(),
            ..Default::default()
        },
        learning: LearningConfig::default(),
        clear_interval: 10.0,
        repair_time: f64::INFINITY,
        roster_events: Vec::new(),
        resource_pools: BTreeMap::new(),
        max_tasks: None,
    }
}

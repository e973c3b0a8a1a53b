//! Mission utility `U`, risk functionals `rho`, and the risk-adjusted
//! portfolio score `E[U] - lambda * rho`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{DiscreteOutcomeDistribution, Marginal};
use crate::model::{ConstraintSlacks, OutcomeVector, Task};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RiskError {
    #[error("CVaR level {0} outside (0, 1]")]
    InvalidLevel(f64),
}

/// Weights of the additive utility
/// `w_s 1[S] - w_l min(L_max, max(0, (T - d)/d)) - sum_k w_k 1[R_k > r_k] - w_c cost`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UtilityConfig {
    pub success_weight: f64,
    pub lateness_weight: f64,
    /// Per-metric violation weight; metrics not listed use
    /// `default_violation_weight`.
    pub violation_weights: BTreeMap<String, f64>,
    pub default_violation_weight: f64,
    pub cost_weight: f64,
    /// Lateness saturates at this many deadlines.
    pub lateness_cap: f64,
}

impl Default for UtilityConfig {
    fn default() -> Self {
        Self {
            success_weight: 1.0,
            lateness_weight: 1.0,
            violation_weights: BTreeMap::new(),
            default_violation_weight: 1.0,
            cost_weight: 0.1,
            lateness_cap: 10.0,
        }
    }
}

impl UtilityConfig {
    pub fn violation_weight(&self, metric: &str) -> f64 {
        self.violation_weights
            .get(metric)
            .copied()
            .unwrap_or(self.default_violation_weight)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        let all = [
            self.success_weight,
            self.lateness_weight,
            self.default_violation_weight,
            self.cost_weight,
        ];
        if all
            .iter()
            .chain(self.violation_weights.values())
            .any(|w| !(*w >= 0.0))
        {
            v.push("utility weights must be >= 0".to_string());
        }
        if !(self.lateness_cap > 0.0) {
            v.push("lateness cap must be > 0".to_string());
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RiskMeasure {
    /// `P[not S or T > d]`.
    DeadlineViolationProb,
    /// CVaR of completion time in units of the deadline, capped at
    /// `1 + lateness_cap`.
    CvarTime,
    /// CVaR of a metric in units of the task's limit for it (raw units if the
    /// task sets no limit).
    CvarMetric(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RiskConfig {
    pub measure: RiskMeasure,
    pub cvar_level: f64,
    pub lambda: f64,
}

impl Default for RiskConfig {
    fn default() -> Self {
        Self {
            measure: RiskMeasure::DeadlineViolationProb,
            cvar_level: 0.1,
            lambda: 1.0,
        }
    }
}

impl RiskConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.cvar_level > 0.0 && self.cvar_level <= 1.0) {
            v.push(format!("cvar level {} outside (0,1]", self.cvar_level));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            v.push("lambda must be a finite value >= 0".to_string());
        }
        v
    }
}

fn metric_violated(outcome: &OutcomeVector, metric: &str, limit: f64) -> bool {
    // an absent metric was never incurred
    outcome.metrics.get(metric).is_some_and(|v| *v > limit)
}

/// Mission utility of a single outcome.
pub fn utility(outcome: &OutcomeVector, task: &Task, cfg: &UtilityConfig, cost: f64) -> f64 {
    let d = task.deadline;
    let success = if outcome.success {
        cfg.success_weight
    } else {
        0.0
    };
    let lateness = if outcome.completion_time.is_infinite() {
        cfg.lateness_cap
    } else {
        ((outcome.completion_time - d) / d)
            .max(0.0)
            .min(cfg.lateness_cap)
    };
    let violations: f64 = task
        .constraints
        .metric_limits
        .iter()
        .filter(|m| metric_violated(outcome, &m.metric, m.limit))
        .map(|m| cfg.violation_weight(&m.metric))
        .sum();
    success - cfg.lateness_weight * lateness - violations - cfg.cost_weight * cost
}

pub fn expected_utility(
    dist: &DiscreteOutcomeDistribution,
    task: &Task,
    cfg: &UtilityConfig,
    cost: f64,
) -> f64 {
    dist.expectation(|o| utility(o, task, cfg, cost))
}

/// Mass of atoms that fail or finish after `deadline`.
pub fn deadline_violation_prob(dist: &DiscreteOutcomeDistribution, deadline: f64) -> f64 {
    dist.probability(|o| !o.on_time(deadline))
}

/// Upper-tail conditional value-at-risk: the mean of the worst `alpha`
/// probability mass, splitting the boundary atom.
pub fn cvar(dist: &Marginal, alpha: f64) -> Result<f64, RiskError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(RiskError::InvalidLevel(alpha));
    }
    let mut remaining = alpha;
    let mut acc = 0.0;
    for &(x, p) in dist.atoms().iter().rev() {
        if remaining <= 0.0 {
            break;
        }
        let take = p.min(remaining);
        acc += take * x;
        remaining -= take;
    }
    Ok(acc / alpha)
}

fn normalized_time(outcome: &OutcomeVector, task: &Task, cap: f64) -> f64 {
    (outcome.completion_time / task.deadline).min(1.0 + cap)
}

fn normalized_metric(outcome: &OutcomeVector, task: &Task, metric: &str) -> f64 {
    let v = outcome.metrics.get(metric).copied().unwrap_or(0.0);
    match task
        .constraints
        .metric_limits
        .iter()
        .find(|m| m.metric == metric)
    {
        Some(m) if m.limit > 0.0 => v / m.limit,
        _ => v,
    }
}

/// The configured risk measure of a composed outcome law for `task`.
pub fn risk_value(
    dist: &DiscreteOutcomeDistribution,
    task: &Task,
    ucfg: &UtilityConfig,
    rcfg: &RiskConfig,
) -> Result<f64, RiskError> {
    match &rcfg.measure {
        RiskMeasure::DeadlineViolationProb => Ok(deadline_violation_prob(dist, task.deadline)),
        RiskMeasure::CvarTime => {
            let m = Marginal::from_weighted(
                dist.atoms()
                    .iter()
                    .map(|a| (normalized_time(&a.outcome, task, ucfg.lateness_cap), a.p)),
            );
            cvar(&m, rcfg.cvar_level)
        }
        RiskMeasure::CvarMetric(k) => {
            let m = Marginal::from_weighted(
                dist.atoms()
                    .iter()
                    .map(|a| (normalized_metric(&a.outcome, task, k), a.p)),
            );
            cvar(&m, rcfg.cvar_level)
        }
    }
}

/// Per-task sample used to estimate the configured risk measure from
/// realised outcomes.
pub fn realized_risk_sample(
    outcome: &OutcomeVector,
    task: &Task,
    ucfg: &UtilityConfig,
    rcfg: &RiskConfig,
) -> f64 {
    match &rcfg.measure {
        RiskMeasure::DeadlineViolationProb => {
            if outcome.on_time(task.deadline) {
                0.0
            } else {
                1.0
            }
        }
        RiskMeasure::CvarTime => normalized_time(outcome, task, ucfg.lateness_cap),
        RiskMeasure::CvarMetric(k) => normalized_metric(outcome, task, k),
    }
}

/// Risk of an equally weighted set of realised samples.
pub fn empirical_risk(samples: &[f64], rcfg: &RiskConfig) -> Result<Option<f64>, RiskError> {
    if samples.is_empty() {
        return Ok(None);
    }
    match rcfg.measure {
        RiskMeasure::DeadlineViolationProb => {
            Ok(Some(samples.iter().sum::<f64>() / samples.len() as f64))
        }
        _ => {
            let w = 1.0 / samples.len() as f64;
            let m = Marginal::from_weighted(samples.iter().map(|x| (*x, w)));
            cvar(&m, rcfg.cvar_level).map(Some)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortfolioScore {
    pub score: f64,
    pub expected_utility: f64,
    pub risk_value: f64,
}

pub fn portfolio_score(
    composed: &DiscreteOutcomeDistribution,
    task: &Task,
    ucfg: &UtilityConfig,
    rcfg: &RiskConfig,
    cost: f64,
) -> Result<PortfolioScore, RiskError> {
    let eu = expected_utility(composed, task, ucfg, cost);
    let risk = risk_value(composed, task, ucfg, rcfg)?;
    Ok(PortfolioScore {
        score: eu - rcfg.lambda * risk,
        expected_utility: eu,
        risk_value: risk,
    })
}

/// Checks `P[S and T <= d] >= theta_d` and `P[R_k <= r_k] >= theta_k` for
/// every metric limit. Slack is attained minus required.
pub fn chance_constraints_hold(
    composed: &DiscreteOutcomeDistribution,
    task: &Task,
) -> (bool, ConstraintSlacks) {
    let c = &task.constraints;
    let on_time = composed.probability(|o| o.on_time(task.deadline));
    let mut slacks = ConstraintSlacks {
        deadline: on_time - c.deadline_confidence,
        metrics: BTreeMap::new(),
    };
    for m in &c.metric_limits {
        let within = composed.probability(|o| !metric_violated(o, &m.metric, m.limit));
        slacks
            .metrics
            .insert(m.metric.clone(), within - m.confidence);
    }
    // tolerate rounding in the probability sums
    let ok = slacks.deadline >= -1e-12 && slacks.metrics.values().all(|s| *s >= -1e-12);
    (ok, slacks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{
        from_quantile_summary, QuantilePoint, QuantileSummary, ReconstructionConfig,
    };
    use crate::model::{ConstraintSet, Context, MetricLimit};

    fn task(deadline: f64, theta: f64) -> Task {
        Task {
            id: "t".into(),
            goal_label: "survey".into(),
            context: Context::default(),
            deadline,
            constraints: ConstraintSet {
                deadline_confidence: theta,
                ..Default::default()
            },
            arrival_time: 0.0,
        }
    }

    fn drone_law() -> DiscreteOutcomeDistribution {
        let q = [
            (0.1, 200.0),
            (0.25, 250.0),
            (0.5, 300.0),
            (0.75, 339.0),
            (0.9, 384.0),
            (0.95, 420.0),
        ];
        let s = QuantileSummary {
            time_quantiles: q
                .iter()
                .map(|&(level, value)| QuantilePoint { level, value })
                .collect(),
            success_prob: 0.9,
            metric_quantiles: BTreeMap::new(),
            cost: 0.0,
        };
        from_quantile_summary(&s, &ReconstructionConfig::default()).unwrap()
    }

    #[test]
    fn on_time_success_earns_success_weight() {
        let t = task(360.0, 0.9);
        let u = utility(
            &OutcomeVector::new(324.0, true),
            &t,
            &UtilityConfig::default(),
            0.0,
        );
        assert_eq!(u, 1.0);
        let at_deadline = utility(
            &OutcomeVector::new(360.0, true),
            &t,
            &UtilityConfig::default(),
            0.0,
        );
        assert_eq!(at_deadline, 1.0);
    }

    #[test]
    fn never_completed_saturates_lateness() {
        let t = task(360.0, 0.9);
        let u = utility(
            &OutcomeVector::never_completed(),
            &t,
            &UtilityConfig::default(),
            0.0,
        );
        assert_eq!(u, -10.0);
    }

    #[test]
    fn metric_violation_is_penalized() {
        let mut t = task(100.0, 0.0);
        t.constraints.metric_limits.push(MetricLimit {
            metric: "smoke".into(),
            limit: 1.0,
            confidence: 0.9,
        });
        let cfg = UtilityConfig::default();
        let safe = utility(
            &OutcomeVector::new(50.0, true).with_metric("smoke", 0.5),
            &t,
            &cfg,
            0.0,
        );
        let unsafe_ = utility(
            &OutcomeVector::new(50.0, true).with_metric("smoke", 1.5),
            &t,
            &cfg,
            0.0,
        );
        assert_eq!(safe - unsafe_, 1.0);
    }

    #[test]
    fn expected_utility_of_two_atoms_is_mean() {
        let t = task(10.0, 0.0);
        let cfg = UtilityConfig::default();
        let a = OutcomeVector::new(5.0, true);
        let b = OutcomeVector::new(20.0, false);
        let d = DiscreteOutcomeDistribution::from_weighted([(a.clone(), 0.5), (b.clone(), 0.5)])
            .unwrap();
        let want = 0.5 * (utility(&a, &t, &cfg, 1.0) + utility(&b, &t, &cfg, 1.0));
        assert!((expected_utility(&d, &t, &cfg, 1.0) - want).abs() < 1e-15);
    }

    #[test]
    fn drone_violation_probability_at_six_minutes() {
        let p = deadline_violation_prob(&drone_law(), 360.0);
        assert!(p >= 0.18, "{p}");
        let always = DiscreteOutcomeDistribution::point(OutcomeVector::new(10.0, true));
        assert_eq!(deadline_violation_prob(&always, 360.0), 0.0);
        let never = DiscreteOutcomeDistribution::point(OutcomeVector::new(10.0, false));
        assert_eq!(deadline_violation_prob(&never, 360.0), 1.0);
    }

    #[test]
    fn cvar_examples() {
        let m = Marginal::from_weighted([(1.0, 0.5), (3.0, 0.3), (9.0, 0.2)]);
        assert!((cvar(&m, 0.2).unwrap() - 9.0).abs() < 1e-12);
        assert!((cvar(&m, 1.0).unwrap() - m.mean()).abs() < 1e-12);
        assert_eq!(cvar(&Marginal::point(4.0), 0.3).unwrap(), 4.0);
        assert!(cvar(&m, 0.0).is_err());
        assert!(cvar(&m, 1.5).is_err());
    }

    #[test]
    fn zero_lambda_score_is_expected_utility() {
        let t = task(360.0, 0.0);
        let rcfg = RiskConfig {
            lambda: 0.0,
            ..Default::default()
        };
        let s = portfolio_score(&drone_law(), &t, &UtilityConfig::default(), &rcfg, 1.0).unwrap();
        assert_eq!(s.score, s.expected_utility);
    }

    #[test]
    fn riskless_law_score_is_expected_utility() {
        let t = task(360.0, 0.0);
        let d = DiscreteOutcomeDistribution::point(OutcomeVector::new(100.0, true));
        let s = portfolio_score(
            &d,
            &t,
            &UtilityConfig::default(),
            &RiskConfig::default(),
            0.0,
        )
        .unwrap();
        assert_eq!(s.risk_value, 0.0);
        assert_eq!(s.score, s.expected_utility);
    }

    #[test]
    fn drone_fails_eighty_percent_deadline_confidence() {
        let (ok, slacks) = chance_constraints_hold(&drone_law(), &task(360.0, 0.8));
        assert!(!ok);
        // P[T <= 360] * P[S] under independence, reconstructed on the grid
        let p = drone_law().time_marginal().cdf(360.0) * 0.9;
        assert!((slacks.deadline - (p - 0.8)).abs() < 1e-12);
        assert!((p - 0.738).abs() < 0.02);
    }

    #[test]
    fn trivial_chance_constraints() {
        assert!(chance_constraints_hold(&drone_law(), &task(360.0, 0.0)).0);
        assert!(!chance_constraints_hold(&drone_law(), &task(1e9, 1.0)).0);
    }

    #[test]
    fn cvar_time_is_capped_for_never_completed() {
        let t = task(100.0, 0.0);
        let d = DiscreteOutcomeDistribution::point(OutcomeVector::never_completed());
        let rcfg = RiskConfig {
            measure: RiskMeasure::CvarTime,
            ..Default::default()
        };
        assert_eq!(
            risk_value(&d, &t, &UtilityConfig::default(), &rcfg).unwrap(),
            11.0
        );
    }

    #[test]
    fn risk_measure_json() {
        let r = RiskConfig {
            measure: RiskMeasure::CvarMetric("smoke".into()),
            ..Default::default()
        };
        let s = serde_json::to_string(&r).unwrap();
        assert!(s.contains(r#""measure":{"cvar_metric":"smoke"}"#), "{s}");
        let d: RiskConfig =
            serde_json::from_str(r#"{"measure":"cvar_time","lambda":2.0}"#).unwrap();
        assert_eq!(d.measure, RiskMeasure::CvarTime);
        assert_eq!(d.cvar_level, 0.1);
    }
}

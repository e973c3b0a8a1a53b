//! Domain types shared by the clearinghouse, the simulator and the baselines,
//! plus the five protocol messages exchanged between agents and the
//! clearinghouse.
//!
//! Everything here is an immutable value object. Behaviour is limited to
//! validation and the eligibility check.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::RiskReport;
use crate::util::maybe_inf;

macro_rules! id_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

id_type!(
    /// Identifier of a task, unique within a run.
    TaskId
);
id_type!(
    /// Identifier of an agent, unique within a registry.
    AgentId
);
id_type!(
    /// Identifier of an option, unique per agent.
    OptionId
);

/// A context feature: either a dimensionless number or a categorical tag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Num(f64),
    Tag(String),
}

impl FeatureValue {
    pub fn as_num(&self) -> Option<f64> {
        match self {
            FeatureValue::Num(v) => Some(*v),
            FeatureValue::Tag(_) => None,
        }
    }
}

impl From<f64> for FeatureValue {
    fn from(v: f64) -> Self {
        FeatureValue::Num(v)
    }
}

impl From<&str> for FeatureValue {
    fn from(v: &str) -> Self {
        FeatureValue::Tag(v.to_string())
    }
}

/// What the system observes when a task is announced.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Context {
    pub features: BTreeMap<String, FeatureValue>,
    /// Simulation time in seconds.
    pub timestamp: f64,
}

impl Context {
    pub fn with(mut self, name: &str, value: impl Into<FeatureValue>) -> Self {
        self.features.insert(name.to_string(), value.into());
        self
    }

    pub fn num(&self, name: &str) -> Option<f64> {
        self.features.get(name).and_then(FeatureValue::as_num)
    }
}

/// A chance constraint on one outcome metric: `P[metric <= limit] >= confidence`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLimit {
    pub metric: String,
    pub limit: f64,
    pub confidence: f64,
}

/// Per-task constraints.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintSet {
    #[serde(default)]
    pub required_roles: BTreeSet<String>,
    /// Required lower bound on `P[success and T <= deadline]`.
    #[serde(default)]
    pub deadline_confidence: f64,
    #[serde(default)]
    pub metric_limits: Vec<MetricLimit>,
    /// Units consumed from each named resource pool while the task runs.
    #[serde(default)]
    pub resource_demands: BTreeMap<String, f64>,
}

/// A unit of demand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: TaskId,
    pub goal_label: String,
    pub context: Context,
    /// Seconds from arrival.
    pub deadline: f64,
    pub constraints: ConstraintSet,
    pub arrival_time: f64,
}

impl Task {
    /// Copy of the task whose deadline is the time remaining at `now`.
    pub fn remaining_at(&self, now: f64) -> Task {
        let mut t = self.clone();
        t.deadline = self.arrival_time + self.deadline - now;
        t
    }

    pub fn absolute_deadline(&self) -> f64 {
        self.arrival_time + self.deadline
    }
}

/// Realised outcome of executing an option (or a whole portfolio).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeVector {
    /// Seconds; `+inf` means the option never completed.
    #[serde(with = "maybe_inf")]
    pub completion_time: f64,
    pub success: bool,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl OutcomeVector {
    pub fn new(completion_time: f64, success: bool) -> Self {
        Self {
            completion_time,
            success,
            metrics: BTreeMap::new(),
        }
    }

    pub fn with_metric(mut self, name: &str, value: f64) -> Self {
        self.metrics.insert(name.to_string(), value);
        self
    }

    /// The outcome of a task nobody worked on.
    pub fn never_completed() -> Self {
        Self::new(f64::INFINITY, false)
    }

    pub fn on_time(&self, deadline: f64) -> bool {
        self.success && self.completion_time <= deadline
    }
}

/// Where an initiation clause looks up its feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Context,
    State,
}

impl fmt::Display for FeatureSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureSource::Context => f.write_str("context"),
            FeatureSource::State => f.write_str("state"),
        }
    }
}

/// One conjunct of an option's initiation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Clause {
    AtLeast {
        source: FeatureSource,
        feature: String,
        value: f64,
    },
    Above {
        source: FeatureSource,
        feature: String,
        value: f64,
    },
    AtMost {
        source: FeatureSource,
        feature: String,
        value: f64,
    },
    Below {
        source: FeatureSource,
        feature: String,
        value: f64,
    },
    Equals {
        source: FeatureSource,
        feature: String,
        value: FeatureValue,
    },
    OneOf {
        source: FeatureSource,
        feature: String,
        values: Vec<String>,
    },
    HasRole {
        role: String,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EligibilityError {
    #[error("initiation clause references unknown {origin} feature `{feature}`")]
    UnknownFeature {
        origin: FeatureSource,
        feature: String,
    },
    #[error("{origin} feature `{feature}` has the wrong type for this clause")]
    TypeMismatch {
        origin: FeatureSource,
        feature: String,
    },
    #[error("option `{0}` is not offered by agent `{1}`")]
    UnknownOption(OptionId, AgentId),
}

impl Clause {
    pub fn holds(
        &self,
        context: &Context,
        agent: &AgentDescriptor,
        option: &OptionSpec,
    ) -> Result<bool, EligibilityError> {
        let lookup = |source: FeatureSource, feature: &str| {
            let map = match source {
                FeatureSource::Context => &context.features,
                FeatureSource::State => &agent.state,
            };
            map.get(feature)
                .ok_or_else(|| EligibilityError::UnknownFeature {
                    origin: source,
                    feature: feature.to_string(),
                })
        };
        let numeric = |source: FeatureSource, feature: &str| {
            lookup(source, feature)?
                .as_num()
                .ok_or_else(|| EligibilityError::TypeMismatch {
                    origin: source,
                    feature: feature.to_string(),
                })
        };
        Ok(match self {
            Clause::AtLeast {
                source,
                feature,
                value,
            } => numeric(*source, feature)? >= *value,
            Clause::Above {
                source,
                feature,
                value,
            } => numeric(*source, feature)? > *value,
            Clause::AtMost {
                source,
                feature,
                value,
            } => numeric(*source, feature)? <= *value,
            Clause::Below {
                source,
                feature,
                value,
            } => numeric(*source, feature)? < *value,
            Clause::Equals {
                source,
                feature,
                value,
            } => lookup(*source, feature)? == value,
            Clause::OneOf {
                source,
                feature,
                values,
            } => match lookup(*source, feature)? {
                FeatureValue::Tag(t) => values.iter().any(|v| v == t),
                FeatureValue::Num(_) => {
                    return Err(EligibilityError::TypeMismatch {
                        origin: *source,
                        feature: feature.clone(),
                    })
                }
            },
            Clause::HasRole { role } => {
                agent.roles.contains(role) || option.roles_provided.contains(role)
            }
        })
    }
}

/// An agent-advertised temporally extended capability. Termination and the
/// internal policy stay private to the agent; `metadata` may carry hints such
/// as a timeout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionSpec {
    pub option_id: OptionId,
    pub label: String,
    #[serde(default)]
    pub initiation: Vec<Clause>,
    #[serde(default)]
    pub roles_provided: BTreeSet<String>,
    #[serde(default)]
    pub nominal_cost: f64,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Human,
    Robot,
    Software,
}

/// How much predictive information an agent exposes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Full,
    Lite,
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentDescriptor {
    pub agent_id: AgentId,
    pub kind: AgentKind,
    pub options: Vec<OptionSpec>,
    #[serde(default)]
    pub roles: BTreeSet<String>,
    /// Location, battery, availability and any other state fields that
    /// initiation clauses may reference.
    #[serde(default)]
    pub state: BTreeMap<String, FeatureValue>,
    pub tier: Tier,
}

impl AgentDescriptor {
    pub fn option(&self, id: &OptionId) -> Option<&OptionSpec> {
        self.options.iter().find(|o| &o.option_id == id)
    }
}

/// One element of the candidate set for a task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub agent_id: AgentId,
    pub option_id: OptionId,
    pub cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RiskReport>,
}

impl Candidate {
    pub fn key(&self) -> (AgentId, OptionId) {
        (self.agent_id.clone(), self.option_id.clone())
    }
}

/// Per-task selection: a primary and an optional backup that starts at
/// `backup_trigger_time` (seconds after dispatch) unless the primary has
/// already succeeded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Portfolio {
    pub task_id: TaskId,
    pub primary: Candidate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backup: Option<Candidate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backup_trigger_time: Option<f64>,
}

impl Portfolio {
    pub fn agents(&self) -> impl Iterator<Item = &AgentId> {
        std::iter::once(&self.primary.agent_id).chain(self.backup.iter().map(|b| &b.agent_id))
    }
}

/// Attained minus required probability for each chance constraint.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintSlacks {
    pub deadline: f64,
    #[serde(default)]
    pub metrics: BTreeMap<String, f64>,
}

impl ConstraintSlacks {
    pub fn all_non_negative(&self) -> bool {
        self.deadline >= 0.0 && self.metrics.values().all(|s| *s >= 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDiagnostics {
    pub score: f64,
    pub expected_utility: f64,
    pub risk_value: f64,
    pub slacks: ConstraintSlacks,
}

/// A global assignment over the active task set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Schedule {
    pub portfolios: BTreeMap<TaskId, Portfolio>,
    pub objective_value: f64,
    pub feasible: bool,
    pub diagnostics: BTreeMap<TaskId, TaskDiagnostics>,
    /// Tasks considered this round that received no portfolio.
    #[serde(default)]
    pub unassigned: BTreeSet<TaskId>,
}

impl Schedule {
    pub fn empty() -> Self {
        Self {
            feasible: true,
            ..Self::default()
        }
    }

    /// Number of portfolio slots (primary or backup) each agent occupies.
    pub fn agent_load(&self) -> BTreeMap<&AgentId, usize> {
        let mut load = BTreeMap::new();
        for p in self.portfolios.values() {
            for a in p.agents() {
                *load.entry(a).or_insert(0) += 1;
            }
        }
        load
    }

    /// Agents whose slot count exceeds `capacity`. Linear in the number of
    /// portfolios.
    pub fn capacity_violations(&self, capacity: usize) -> Vec<AgentId> {
        self.agent_load()
            .into_iter()
            .filter(|(_, n)| *n > capacity)
            .map(|(a, _)| a.clone())
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Protocol messages
// ---------------------------------------------------------------------------

/// Sent once by each agent when it joins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionAdvertisement {
    pub agent_id: AgentId,
    pub kind: AgentKind,
    pub roles: BTreeSet<String>,
    pub options: Vec<OptionSpec>,
}

impl From<&AgentDescriptor> for OptionAdvertisement {
    fn from(a: &AgentDescriptor) -> Self {
        Self {
            agent_id: a.agent_id.clone(),
            kind: a.kind,
            roles: a.roles.clone(),
            options: a.options.clone(),
        }
    }
}

/// Broadcast of a newly active task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaskAnnouncement(pub Task);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchMessage {
    pub task_id: TaskId,
    pub portfolio: Portfolio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeReport {
    pub task_id: TaskId,
    pub agent_id: AgentId,
    pub option_id: OptionId,
    pub outcome: OutcomeVector,
}

// ---------------------------------------------------------------------------
// Validation and eligibility
// ---------------------------------------------------------------------------

fn in_unit(x: f64) -> bool {
    (0.0..=1.0).contains(&x)
}

/// Returns every invariant violation of `task`; empty means valid.
pub fn validate_task(task: &Task) -> Vec<String> {
    let mut v = Vec::new();
    if !(task.deadline > 0.0) || !task.deadline.is_finite() {
        v.push("deadline must be > 0".to_string());
    }
    if !(task.context.timestamp >= 0.0) || !task.context.timestamp.is_finite() {
        v.push("context timestamp must be finite and >= 0".to_string());
    }
    if !task.arrival_time.is_finite() {
        v.push("arrival time must be finite".to_string());
    }
    for (name, f) in &task.context.features {
        if let FeatureValue::Num(x) = f {
            if !x.is_finite() {
                v.push(format!("context feature `{name}` must be finite"));
            }
        }
    }
    let c = &task.constraints;
    if !in_unit(c.deadline_confidence) {
        v.push("deadline confidence outside [0,1]".to_string());
    }
    for m in &c.metric_limits {
        if !in_unit(m.confidence) {
            v.push(format!("metric `{}` confidence outside [0,1]", m.metric));
        }
        if !m.limit.is_finite() {
            v.push(format!("metric `{}` limit must be finite", m.metric));
        }
    }
    for (pool, d) in &c.resource_demands {
        if !(*d >= 0.0) || !d.is_finite() {
            v.push(format!("resource demand for `{pool}` must be >= 0"));
        }
    }
    v
}

/// Violations of an outcome against the metrics its constraint set names.
pub fn validate_outcome(outcome: &OutcomeVector, constraints: &ConstraintSet) -> Vec<String> {
    let mut v = Vec::new();
    if !(outcome.completion_time > 0.0) {
        v.push("completion time must be > 0".to_string());
    }
    for m in &constraints.metric_limits {
        if !outcome.metrics.contains_key(&m.metric) {
            v.push(format!("metric `{}` missing from outcome", m.metric));
        }
    }
    v
}

/// Whether `option` of `agent` may be started for `task`: the initiation
/// clauses hold on the task context and agent state, and the required roles
/// are covered by the agent's roles together with those the option provides.
pub fn is_eligible(
    agent: &AgentDescriptor,
    option: &OptionSpec,
    task: &Task,
) -> Result<bool, EligibilityError> {
    if agent.option(&option.option_id).is_none() {
        return Err(EligibilityError::UnknownOption(
            option.option_id.clone(),
            agent.agent_id.clone(),
        ));
    }
    for clause in &option.initiation {
        if !clause.holds(&task.context, agent, option)? {
            return Ok(false);
        }
    }
    Ok(task
        .constraints
        .required_roles
        .iter()
        .all(|r| agent.roles.contains(r) || option.roles_provided.contains(r)))
}

//! Scenario description: task templates, roster, mechanism and solver
//! settings.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agents::AgentProfile;
use crate::calibration::ModelConfig;
use crate::clearinghouse::{ClearingConfig, Mechanism};
use crate::model::{validate_task, ConstraintSet, Context, FeatureValue, Task, TaskId};

use super::SimError;

/// Relative deadline law of a template, in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum DeadlineLaw {
    Fixed { value: f64 },
    Uniform { low: f64, high: f64 },
}

impl DeadlineLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            DeadlineLaw::Fixed { value } => *value,
            DeadlineLaw::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        }
    }
}

/// Generator of one context feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "gen", rename_all = "snake_case")]
pub enum FeatureGen {
    Fixed { value: FeatureValue },
    Uniform { low: f64, high: f64 },
    Choice { values: Vec<String> },
}

impl FeatureGen {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> FeatureValue {
        match self {
            FeatureGen::Fixed { value } => value.clone(),
            FeatureGen::Uniform { low, high } => {
                FeatureValue::Num(low + (high - low) * rng.random::<f64>())
            }
            FeatureGen::Choice { values } => {
                let i =
                    ((rng.random::<f64>() * values.len() as f64) as usize).min(values.len() - 1);
                FeatureValue::Tag(values[i].clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskTemplate {
    pub goal_label: String,
    /// Poisson arrival rate.
    pub rate_per_hour: f64,
    pub deadline: DeadlineLaw,
    #[serde(default)]
    pub constraints: ConstraintSet,
    #[serde(default)]
    pub context: BTreeMap<String, FeatureGen>,
}

impl TaskTemplate {
    pub fn instantiate<R: Rng + ?Sized>(&self, id: TaskId, at: f64, rng: &mut R) -> Task {
        let mut ctx = Context {
            features: BTreeMap::new(),
            timestamp: at,
        };
        ctx.features.insert(
            "goal".to_string(),
            FeatureValue::Tag(self.goal_label.clone()),
        );
        for (name, g) in &self.context {
            ctx.features.insert(name.clone(), g.sample(rng));
        }
        Task {
            id,
            goal_label: self.goal_label.clone(),
            context: ctx,
            deadline: self.deadline.sample(rng),
            constraints: self.constraints.clone(),
            arrival_time: at,
        }
    }
}

/// Agents inline, or a path to a JSON roster file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Roster {
    Inline(Vec<AgentProfile>),
    Path(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RosterChange {
    Join { agent: AgentProfile },
    Leave { agent_id: crate::model::AgentId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RosterEvent {
    pub time: f64,
    #[serde(flatten)]
    pub change: RosterChange,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningConfig {
    pub model: ModelConfig,
    /// Refit the Min-tier model after this many new ledger records.
    pub refit_every: usize,
}

impl Default for LearningConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            refit_every: 1,
        }
    }
}

fn default_interval() -> f64 {
    10.0
}

fn default_repair() -> f64 {
    f64::INFINITY
}

fn default_name() -> String {
    "scenario".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Simulated seconds.
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mechanism: Mechanism,
    pub task_templates: Vec<TaskTemplate>,
    pub roster: Roster,
    /// Solver, utility, risk, recalibration and reconstruction settings.
    /// Its `mechanism` and `seed` are taken from the fields above.
    #[serde(default)]
    pub clearing: ClearingConfig,
    #[serde(default)]
    pub learning: LearningConfig,
    /// Period of clearing ticks in simulated seconds.
    #[serde(default = "default_interval")]
    pub clear_interval: f64,
    /// Time a failed agent stays down.
    #[serde(default = "default_repair", with = "crate::util::maybe_inf")]
    pub repair_time: f64,
    #[serde(default)]
    pub roster_events: Vec<RosterEvent>,
    /// Budgets of shared consumable resources.
    #[serde(default)]
    pub resource_pools: BTreeMap<String, f64>,
    /// Stops generating arrivals after this many tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tasks: Option<usize>,
}

impl ScenarioConfig {
    /// Loads the roster file if the roster is a path, relative to `base`.
    pub fn resolve_roster(&mut self, base: Option<&Path>) -> Result<(), SimError> {
        if let Roster::Path(p) = &self.roster {
            let path = match base {
                Some(b) if Path::new(p).is_relative() => b.join(p),
                _ => Path::new(p).to_path_buf(),
            };
            let text = std::fs::read_to_string(&path)
                .map_err(|e| SimError::Config(format!("roster `{}`: {e}", path.display())))?;
            let agents: Vec<AgentProfile> = serde_json::from_str(&text)
                .map_err(|e| SimError::Config(format!("roster `{}`: {e}", path.display())))?;
            self.roster = Roster::Inline(agents);
        }
        Ok(())
    }

    pub fn agents(&self) -> Result<&[AgentProfile], SimError> {
        match &self.roster {
            Roster::Inline(a) => Ok(a),
            Roster::Path(p) => Err(SimError::Config(format!("roster `{p}` not loaded"))),
        }
    }

    /// Every validation failure, empty when the config is usable.
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            v.push("horizon must be a finite value > 0".to_string());
        }
        if !(self.clear_interval > 0.0) {
            v.push("clear interval must be > 0".to_string());
        }
        if !(self.repair_time > 0.0) {
            v.push("repair time must be > 0".to_string());
        }
        for (i, t) in self.task_templates.iter().enumerate() {
            if !(t.rate_per_hour >= 0.0) || !t.rate_per_hour.is_finite() {
                v.push(format!("template {i}: rate must be a finite value >= 0"));
            }
            match t.deadline {
                DeadlineLaw::Fixed { value } if !(value > 0.0) => {
                    v.push(format!("template {i}: deadline must be > 0"))
                }
                DeadlineLaw::Uniform { low, high } if !(low > 0.0 && high >= low) => v.push(
                    format!("template {i}: deadline range must satisfy 0 < low <= high"),
                ),
                _ => {}
            }
            for (name, g) in &t.context {
                match g {
                    FeatureGen::Uniform { low, high } if !(high >= low) => {
                        v.push(format!("template {i}: feature `{name}` has high < low"))
                    }
                    FeatureGen::Choice { values } if values.is_empty() => {
                        v.push(format!("template {i}: feature `{name}` has no choices"))
                    }
                    _ => {}
                }
            }
            let probe = Task {
                id: "probe".into(),
                goal_label: t.goal_label.clone(),
                context: Context::default(),
                deadline: 1.0,
                constraints: t.constraints.clone(),
                arrival_time: 0.0,
            };
            v.extend(
                validate_task(&probe)
                    .into_iter()
                    .map(|m| format!("template {i}: {m}")),
            );
        }
        if let Roster::Inline(agents) = &self.roster {
            let mut seen = std::collections::BTreeSet::new();
            for a in agents {
                if !seen.insert(a.descriptor.agent_id.clone()) {
                    v.push(format!("duplicate agent `{}`", a.descriptor.agent_id));
                }
                v.extend(a.validate());
            }
        }
        for (name, b) in &self.resource_pools {
            if !(*b >= 0.0) {
                v.push(format!("resource pool `{name}` budget must be >= 0"));
            }
        }
        v.extend(self.clearing.solver.validate());
        v.extend(self.clearing.utility.validate());
        v.extend(self.clearing.risk.validate());
        v
    }

    /// Clearing settings with the scenario's mechanism and seed applied.
    pub fn clearing_config(&self) -> ClearingConfig {
        let mut c = self.clearing.clone();
        c.mechanism = self.mechanism;
        c.seed = self.seed;
        c
    }
}

//! Seeded discrete-event simulation of a task-allocation mission: arrivals,
//! clearing rounds, dispatch, execution, failures and metric collection.

mod config;
mod engine;
mod grid;


use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::calibration::LedgerError;
use crate::clearinghouse::{CandidateKey, ClearingError, Mechanism, ResolutionKind};
use crate::model::{AgentId, OptionId, TaskId};

pub use config::{
    DeadlineLaw, FeatureGen, LearningConfig, Roster, RosterChange, RosterEvent, ScenarioConfig,
    TaskTemplate,
};
pub use engine::{run, run_with, RunDiagnostics, RunOptions, RunOutput, TaskResult};
pub use grid::{
    aggregate, expand_grid, run_grid, AggregateRow, GridConfig, GridPoint, GridResult, GridRow,
    MeanStderr,
};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Clearing(#[from] ClearingError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Agent(#[from] crate::agents::AgentError),
    #[error(transparent)]
    Distribution(#[from] crate::distributions::DistributionError),
    #[error(transparent)]
    Risk(#[from] crate::risk::RiskError),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// One entry of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub time: f64,
    #[serde(flatten)]
    pub event: LoggedEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LoggedEvent {
    TaskAnnouncement {
        task_id: TaskId,
        bytes: usize,
    },
    RiskReport {
        task_id: TaskId,
        agent_id: AgentId,
        option_id: OptionId,
        bytes: usize,
    },
    DispatchMessage {
        task_id: TaskId,
        primary: CandidateKey,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        backup: Option<CandidateKey>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        backup_trigger_time: Option<f64>,
        bytes: usize,
    },
    OutcomeReport {
        task_id: TaskId,
        agent_id: AgentId,
        option_id: OptionId,
        attempt: u32,
        success: bool,
        #[serde(with = "crate::util::maybe_inf")]
        completion_time: f64,
        bytes: usize,
    },
    BackupStart {
        task_id: TaskId,
        agent_id: AgentId,
        option_id: OptionId,
    },
    AgentFailure {
        agent_id: AgentId,
    },
    AgentRepair {
        agent_id: AgentId,
    },
    AgentJoin {
        agent_id: AgentId,
    },
    AgentLeave {
        agent_id: AgentId,
    },
    TaskResolved {
        task_id: TaskId,
        kind: ResolutionKind,
        success: bool,
        #[serde(with = "crate::util::maybe_inf")]
        completion_time: f64,
    },
}

impl LoggedEvent {
    /// Size of the protocol message this entry records, if it is one.
    pub fn message_bytes(&self) -> Option<usize> {
        match self {
            LoggedEvent::TaskAnnouncement { bytes, .. }
            | LoggedEvent::RiskReport { bytes, .. }
            | LoggedEvent::DispatchMessage { bytes, .. }
            | LoggedEvent::OutcomeReport { bytes, .. } => Some(*bytes),
            _ => None,
        }
    }
}

/// Mission-level metrics of one run. Rates are over all arrived tasks and
/// are `None` when no task arrived.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mechanism: Mechanism,
    pub seed: u64,
    pub lambda: f64,
    pub tasks: usize,
    pub dispatched: usize,
    pub completed: usize,
    pub expired: usize,
    pub truncated: usize,
    /// Fraction of tasks that ended in success, on time or not.
    pub mission_success_rate: Option<f64>,
    /// Fraction of tasks without success by the deadline.
    pub deadline_violation_rate: Option<f64>,
    /// Fraction of tasks with a realised metric above its limit.
    pub safety_violation_rate: Option<f64>,
    pub mean_utility: Option<f64>,
    pub empirical_risk: Option<f64>,
    /// Mean utility minus lambda times the empirical risk.
    pub risk_adjusted_utility: Option<f64>,
    /// Mean simulated seconds from arrival to first dispatch.
    pub reassignment_latency: Option<f64>,
    pub message_count: u64,
    pub message_bytes: u64,
    pub mean_brier: Option<f64>,
    pub mean_crps: Option<f64>,
    pub ledger_records: usize,
    pub rounds: u64,
}

/// Numeric metric columns in their fixed output order.
pub const METRIC_COLUMNS: [&str; 17] = [
    "tasks",
    "dispatched",
    "completed",
    "expired",
    "truncated",
    "mission_success_rate",
    "deadline_violation_rate",
    "safety_violation_rate",
    "mean_utility",
    "empirical_risk",
    "risk_adjusted_utility",
    "reassignment_latency",
    "message_count",
    "message_bytes",
    "mean_brier",
    "mean_crps",
    "ledger_records",
];

impl MetricsReport {
    /// Values in `METRIC_COLUMNS` order.
    pub fn values(&self) -> [Option<f64>; 17] {
        [
            Some(self.tasks as f64),
            Some(self.dispatched as f64),
            Some(self.completed as f64),
            Some(self.expired as f64),
            Some(self.truncated as f64),
            self.mission_success_rate,
            self.deadline_violation_rate,
            self.safety_violation_rate,
            self.mean_utility,
            self.empirical_risk,
            self.risk_adjusted_utility,
            self.reassignment_latency,
            Some(self.message_count as f64),
            Some(self.message_bytes as f64),
            self.mean_brier,
            self.mean_crps,
            Some(self.ledger_records as f64),
        ]
    }
}

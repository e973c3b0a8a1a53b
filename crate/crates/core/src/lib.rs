//! Risk-aware option clearing.
//!
//! Agents advertise temporally extended skills ("options") together with
//! predictive risk reports. A clearinghouse assigns options to
//! deadline-constrained tasks by maximising expected mission utility minus a
//! risk penalty, subject to chance constraints and shared capacity, and keeps
//! a calibration ledger that scores every report against what actually
//! happened.
//!
//! Three reporting tiers share the same decision structure:
//!
//! * **Full**: agents send a finite-support joint outcome distribution.
//! * **Lite**: agents send a quantile summary plus a success probability.
//! * **Min**: agents only advertise options; outcome models are learned
//!   centrally from logged executions.
//!
//! The crate also contains simulated agents with configurable
//! miscalibration, three comparison mechanisms (scalar auction, Contract Net,
//! risk-neutral central scheduler) and a seeded discrete-event simulator of a
//! disaster-response benchmark.

pub mod agents;
pub mod baselines;
pub mod calibration;
pub mod clearinghouse;
pub mod distributions;
pub mod model;
pub mod output;
pub mod risk;
pub mod scenarios;
pub mod simulator;
pub mod util;

pub use agents::{AgentProfile, OptionTruth, ReportingProfile, ScalarLaw};
pub use clearinghouse::{
    clear, ClearingEvent, ClearingState, Mechanism, ReclearOutcome, ReportSources, SolverConfig,
    SolverMode,
};
pub use distributions::{DiscreteOutcomeDistribution, Marginal, QuantileSummary, RiskReport};
pub use model::{
    AgentDescriptor, AgentId, Candidate, ConstraintSet, Context, OptionId, OptionSpec,
    OutcomeVector, Portfolio, Schedule, Task, TaskId, Tier,
};
pub use risk::{RiskConfig, RiskMeasure, UtilityConfig};
pub use simulator::{MetricsReport, ScenarioConfig};

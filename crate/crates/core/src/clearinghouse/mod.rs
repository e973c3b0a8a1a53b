//! The decision engine: candidate enumeration, portfolio construction and
//! evaluation, the global assignment over the active task set, and
//! event-driven re-clearing.

mod events;
mod solver;

use std::collections::{BTreeMap, BTreeSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baselines::{self, BaselineConfig, BidRow};
use crate::calibration::{
    recalibrate, reputation_rank, CalibrationLedger, EmpiricalModel, RecalibrationConfig,
};
use crate::distributions::{
    compose_portfolio, sample, DiscreteOutcomeDistribution, DistributionError,
    ReconstructionConfig, RiskReport,
};
use crate::model::{
    is_eligible, AgentDescriptor, AgentId, Candidate, ConstraintSlacks, OptionId, OptionSpec,
    OutcomeVector, Portfolio, Schedule, Task, TaskDiagnostics, TaskId, Tier,
};
use crate::risk::{chance_constraints_hold, portfolio_score, RiskConfig, RiskError, UtilityConfig};
use crate::util::stable_hash;

pub use events::{
    reclear_on_event, BackupStart, ClearingEvent, Dispatch, ReclearOutcome, Resolution,
    ResolutionKind,
};
pub use solver::{solve, Assignment, Choice, Problem};

#[derive(Debug, Error)]
pub enum ClearingError {
    #[error("joint portfolio space {size} exceeds the exhaustive limit {limit}; use greedy or greedy_plus_local_search")]
    ExhaustiveLimit { size: u128, limit: u64 },
    #[error("inconsistent clearing state: {0}")]
    InconsistentState(String),
    #[error("candidate ({agent}, {option}) has no risk report")]
    MissingReport { agent: AgentId, option: OptionId },
    #[error("unknown task `{0}`")]
    UnknownTask(TaskId),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
    #[error(transparent)]
    Risk(#[from] RiskError),
}

/// Which clearing mechanism runs each round.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "snake_case")]
pub enum Mechanism {
    #[default]
    RocFull,
    RocLite,
    RocMin,
    Auction,
    ContractNet,
    CentralNodl,
}

impl Mechanism {
    pub const ALL: [Mechanism; 6] = [
        Mechanism::RocFull,
        Mechanism::RocLite,
        Mechanism::RocMin,
        Mechanism::Auction,
        Mechanism::ContractNet,
        Mechanism::CentralNodl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mechanism::RocFull => "roc_full",
            Mechanism::RocLite => "roc_lite",
            Mechanism::RocMin => "roc_min",
            Mechanism::Auction => "auction",
            Mechanism::ContractNet => "contract_net",
            Mechanism::CentralNodl => "central_nodl",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }

    /// Tier at which agents report under this mechanism. Baseline agents
    /// compute their scalar summaries from their own full law.
    pub fn report_tier(self) -> Tier {
        match self {
            Mechanism::RocLite => Tier::Lite,
            Mechanism::RocMin => Tier::Min,
            _ => Tier::Full,
        }
    }

    pub fn is_roc(self) -> bool {
        matches!(
            self,
            Mechanism::RocFull | Mechanism::RocLite | Mechanism::RocMin
        )
    }
}

impl std::fmt::Display for Mechanism {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverMode {
    Exhaustive,
    Greedy,
    #[default]
    GreedyPlusLocalSearch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub mode: SolverMode,
    /// Largest joint portfolio space exhaustive mode will enumerate.
    pub exhaustive_limit: u64,
    pub local_search_iters: usize,
    pub allow_backups: bool,
    /// Monte Carlo samples per portfolio evaluation; 0 means exact.
    pub mc_samples: usize,
    /// Chance constraints filter portfolios when set.
    pub enforce_constraints: bool,
    /// Portfolio slots (primary or backup) each agent may hold at once.
    pub agent_capacity: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            mode: SolverMode::default(),
            exhaustive_limit: 10_000,
            local_search_iters: 200,
            allow_backups: true,
            mc_samples: 0,
            enforce_constraints: true,
            agent_capacity: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.exhaustive_limit == 0 {
            v.push("exhaustive limit must be positive".to_string());
        }
        if self.agent_capacity == 0 {
            v.push("agent capacity must be positive".to_string());
        }
        v
    }
}

/// Everything that parameterises a clearing round.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ClearingConfig {
    pub mechanism: Mechanism,
    pub solver: SolverConfig,
    pub utility: UtilityConfig,
    pub risk: RiskConfig,
    pub recalibration: RecalibrationConfig,
    pub reconstruction: ReconstructionConfig,
    pub baseline: BaselineConfig,
    /// Seed for randomised protocol steps (contract-net declines, Monte
    /// Carlo evaluation).
    pub seed: u64,
}

/// Source of agent-side reports.
pub trait ReportProvider: Sync {
    /// The report `agent` sends for `option` on `task` at `tier`; `None`
    /// when the agent cannot report.
    fn report(
        &self,
        agent: &AgentDescriptor,
        option: &OptionSpec,
        task: &Task,
        tier: Tier,
    ) -> Option<RiskReport>;
}

/// Provider that never reports, for mechanisms that rely on learned models.
pub struct NoReports;

impl ReportProvider for NoReports {
    fn report(&self, _: &AgentDescriptor, _: &OptionSpec, _: &Task, _: Tier) -> Option<RiskReport> {
        None
    }
}

/// Where reports come from in a round: agents, the learned model for
/// Min-tier reporting, and the ledger used for recalibration and
/// reputation.
#[derive(Clone, Copy)]
pub struct ReportSources<'a> {
    pub agents: &'a dyn ReportProvider,
    pub model: Option<&'a EmpiricalModel>,
    pub ledger: Option<&'a CalibrationLedger>,
}

impl<'a> ReportSources<'a> {
    pub fn agents_only(agents: &'a dyn ReportProvider) -> Self {
        Self {
            agents,
            model: None,
            ledger: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourcePool {
    pub budget: f64,
    #[serde(default)]
    pub consumed: f64,
}

/// An executing portfolio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub task: Task,
    pub portfolio: Portfolio,
    pub dispatched_at: f64,
    /// Reports as sent (or, for Min tier, as predicted by the model), used
    /// for ledger scoring.
    pub primary_report: Option<RiskReport>,
    pub backup_report: Option<RiskReport>,
    pub primary_running: bool,
    pub backup_started_at: Option<f64>,
    pub backup_running: bool,
    pub primary_outcome: Option<OutcomeVector>,
    pub resolved: bool,
}

/// Mutable state of the clearinghouse between rounds.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClearingState {
    pub now: f64,
    /// Tasks awaiting dispatch.
    pub active_tasks: BTreeMap<TaskId, Task>,
    pub registry: BTreeMap<AgentId, AgentDescriptor>,
    /// Agents executing or reserved as backup, with their task.
    pub busy: BTreeMap<AgentId, TaskId>,
    /// Broken agents and the time they come back.
    pub unavailable: BTreeMap<AgentId, f64>,
    pub resource_pools: BTreeMap<String, ResourcePool>,
    pub executions: BTreeMap<TaskId, Execution>,
    pub round_counter: u64,
}

impl ClearingState {
    pub fn new(agents: impl IntoIterator<Item = AgentDescriptor>) -> Self {
        Self {
            registry: agents
                .into_iter()
                .map(|a| (a.agent_id.clone(), a))
                .collect(),
            ..Default::default()
        }
    }

    pub fn is_available(&self, agent: &AgentId) -> bool {
        !self.busy.contains_key(agent) && !self.unavailable.contains_key(agent)
    }

    pub fn check_consistency(&self) -> Result<(), ClearingError> {
        for (a, t) in &self.busy {
            if !self.registry.contains_key(a) {
                return Err(ClearingError::InconsistentState(format!(
                    "busy agent `{a}` is not registered"
                )));
            }
            if !self.executions.contains_key(t) {
                return Err(ClearingError::InconsistentState(format!(
                    "agent `{a}` is busy with task `{t}` which is not executing"
                )));
            }
        }
        for t in self.active_tasks.keys() {
            if self.executions.contains_key(t) {
                return Err(ClearingError::InconsistentState(format!(
                    "task `{t}` is both pending and executing"
                )));
            }
        }
        for (name, p) in &self.resource_pools {
            if p.consumed > p.budget + 1e-9 {
                return Err(ClearingError::InconsistentState(format!(
                    "resource pool `{name}` consumed beyond budget"
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Candidates and portfolios
// ---------------------------------------------------------------------------

/// A candidate with the report that drives the decision and the report
/// the agent actually sent.
#[derive(Debug, Clone, PartialEq)]
pub struct EnumeratedCandidate {
    pub candidate: Candidate,
    pub sent: Option<RiskReport>,
}

/// Eligible, available (agent, option) pairs for `task` in registry order,
/// with reports filled in at `tier`: agent reports recalibrated against
/// the ledger, or learned-model laws for Min tier.
pub fn enumerate_with_reports(
    state: &ClearingState,
    task: &Task,
    tier: Tier,
    cfg: &ClearingConfig,
    sources: &ReportSources<'_>,
) -> Vec<EnumeratedCandidate> {
    let mut out = Vec::new();
    for agent in state.registry.values() {
        if !state.is_available(&agent.agent_id) {
            continue;
        }
        for opt in &agent.options {
            // a clause naming a feature this task or agent lacks cannot hold
            if !is_eligible(agent, opt, task).unwrap_or(false) {
                continue;
            }
            let (report, sent) = match tier {
                Tier::Min => {
                    let r = sources.model.map(|m| RiskReport::Full {
                        atoms: m
                            .lookup(&agent.agent_id, &opt.option_id, &task.context)
                            .0
                            .clone(),
                    });
                    (r.clone(), r)
                }
                _ => {
                    let sent = sources.agents.report(agent, opt, task, tier);
                    let effective = match (&sent, sources.ledger) {
                        (Some(r), Some(l)) if cfg.recalibration.enabled => recalibrate(
                            r,
                            l.key_stats(&agent.agent_id, &opt.option_id),
                            &cfg.recalibration,
                            &cfg.reconstruction,
                        )
                        .ok(),
                        _ => sent.clone(),
                    };
                    (effective, sent)
                }
            };
            out.push(EnumeratedCandidate {
                candidate: Candidate {
                    agent_id: agent.agent_id.clone(),
                    option_id: opt.option_id.clone(),
                    cost: opt.nominal_cost,
                    report,
                },
                sent,
            });
        }
    }
    out
}

pub fn enumerate_candidates(
    state: &ClearingState,
    task: &Task,
    cfg: &ClearingConfig,
    sources: &ReportSources<'_>,
) -> Vec<Candidate> {
    enumerate_with_reports(state, task, cfg.mechanism.report_tier(), cfg, sources)
        .into_iter()
        .map(|c| c.candidate)
        .collect()
}

fn law_of(
    c: &Candidate,
    recon: &ReconstructionConfig,
) -> Result<DiscreteOutcomeDistribution, ClearingError> {
    c.report
        .as_ref()
        .map(|r| r.to_distribution(recon))
        .transpose()?
        .flatten()
        .ok_or_else(|| ClearingError::MissingReport {
            agent: c.agent_id.clone(),
            option: c.option_id.clone(),
        })
}

/// Backup trigger for a primary law: its q0.95 completion time clamped to
/// `(0, deadline]`.
pub fn trigger_time(primary: &DiscreteOutcomeDistribution, deadline: f64) -> f64 {
    let q = primary.time_marginal().quantile(0.95);
    let t = q.min(deadline);
    if t > 0.0 {
        t
    } else {
        deadline.max(f64::MIN_POSITIVE)
    }
}

/// Singletons, plus every ordered pair of candidates on distinct agents
/// when backups are allowed.
pub fn build_portfolios(
    candidates: &[Candidate],
    allow_backups: bool,
    task: &Task,
    recon: &ReconstructionConfig,
) -> Result<Vec<Portfolio>, ClearingError> {
    let laws: Vec<_> = candidates
        .iter()
        .map(|c| law_of(c, recon))
        .collect::<Result<_, _>>()?;
    Ok(build_with_laws(candidates, &laws, allow_backups, task))
}

fn build_with_laws(
    candidates: &[Candidate],
    laws: &[DiscreteOutcomeDistribution],
    allow_backups: bool,
    task: &Task,
) -> Vec<Portfolio> {
    let mut out = Vec::new();
    for (i, c) in candidates.iter().enumerate() {
        out.push(Portfolio {
            task_id: task.id.clone(),
            primary: c.clone(),
            backup: None,
            backup_trigger_time: None,
        });
        if !allow_backups {
            continue;
        }
        let trig = trigger_time(&laws[i], task.deadline);
        for b in candidates {
            if b.agent_id == c.agent_id {
                continue;
            }
            out.push(Portfolio {
                task_id: task.id.clone(),
                primary: c.clone(),
                backup: Some(b.clone()),
                backup_trigger_time: Some(trig),
            });
        }
    }
    out
}

/// Result of evaluating one portfolio for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub score: f64,
    pub expected_utility: f64,
    pub risk_value: f64,
    pub feasible: bool,
    pub slacks: ConstraintSlacks,
    /// Primary cost plus backup cost times the trigger probability.
    pub cost: f64,
    pub trigger_prob: f64,
}

/// Score of leaving `task` unassigned: the law that never completes.
pub fn null_score(task: &Task, cfg: &ClearingConfig) -> Result<f64, ClearingError> {
    let d = DiscreteOutcomeDistribution::point(OutcomeVector::never_completed());
    Ok(portfolio_score(&d, task, &cfg.utility, &cfg.risk, 0.0)?.score)
}

fn monte_carlo_composition(
    primary: &DiscreteOutcomeDistribution,
    backup: &DiscreteOutcomeDistribution,
    trigger: f64,
    portfolio: &Portfolio,
    cfg: &ClearingConfig,
) -> DiscreteOutcomeDistribution {
    let b = portfolio.backup.as_ref().expect("pair");
    let seed = stable_hash(&[
        &cfg.seed.to_le_bytes(),
        portfolio.task_id.as_str().as_bytes(),
        portfolio.primary.agent_id.as_str().as_bytes(),
        portfolio.primary.option_id.as_str().as_bytes(),
        b.agent_id.as_str().as_bytes(),
        b.option_id.as_str().as_bytes(),
    ]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.solver.mc_samples;
    let w = 1.0 / n as f64;
    let items = (0..n).map(|_| {
        let p = sample(primary, &mut rng);
        let q = sample(backup, &mut rng);
        let single = DiscreteOutcomeDistribution::point(p);
        let pair = DiscreteOutcomeDistribution::point(q);
        let o = compose_portfolio(&single, Some(&pair), trigger, 1).atoms()[0]
            .outcome
            .clone();
        (o, w)
    });
    DiscreteOutcomeDistribution::from_weighted(items).expect("samples")
}

fn evaluate_with_laws(
    portfolio: &Portfolio,
    primary: &DiscreteOutcomeDistribution,
    backup: Option<&DiscreteOutcomeDistribution>,
    task: &Task,
    cfg: &ClearingConfig,
) -> Result<Evaluation, ClearingError> {
    let trigger = portfolio.backup_trigger_time.unwrap_or(task.deadline);
    let (composed, trigger_prob) = match backup {
        None => (primary.clone(), 0.0),
        Some(b) => {
            let done = primary.probability(|o| o.success && o.completion_time <= trigger);
            let law = if cfg.solver.mc_samples > 0 {
                monte_carlo_composition(primary, b, trigger, portfolio, cfg)
            } else {
                compose_portfolio(primary, Some(b), trigger, cfg.reconstruction.support_cap)
            };
            (law, (1.0 - done).max(0.0))
        }
    };
    let cost = portfolio.primary.cost
        + portfolio
            .backup
            .as_ref()
            .map_or(0.0, |b| b.cost * trigger_prob);
    let s = portfolio_score(&composed, task, &cfg.utility, &cfg.risk, cost)?;
    let (ok, slacks) = chance_constraints_hold(&composed, task);
    Ok(Evaluation {
        score: s.score,
        expected_utility: s.expected_utility,
        risk_value: s.risk_value,
        feasible: ok || !cfg.solver.enforce_constraints,
        slacks,
        cost,
        trigger_prob,
    })
}

/// Composes the portfolio law and scores it against `task`.
pub fn evaluate_portfolio(
    portfolio: &Portfolio,
    task: &Task,
    cfg: &ClearingConfig,
) -> Result<Evaluation, ClearingError> {
    let p = law_of(&portfolio.primary, &cfg.reconstruction)?;
    let b = portfolio
        .backup
        .as_ref()
        .map(|b| law_of(b, &cfg.reconstruction))
        .transpose()?;
    evaluate_with_laws(portfolio, &p, b.as_ref(), task, cfg)
}

// ---------------------------------------------------------------------------
// Decision log
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidateKey {
    pub agent_id: AgentId,
    pub option_id: OptionId,
}

impl From<&Candidate> for CandidateKey {
    fn from(c: &Candidate) -> Self {
        Self {
            agent_id: c.agent_id.clone(),
            option_id: c.option_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRow {
    pub primary: CandidateKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backup: Option<CandidateKey>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backup_trigger_time: Option<f64>,
    #[serde(flatten)]
    pub evaluation: Evaluation,
}

impl EvaluationRow {
    /// Rebuilds the portfolio this row scored from the logged candidates.
    pub fn portfolio(&self, task_id: &TaskId, candidates: &[Candidate]) -> Option<Portfolio> {
        let find = |k: &CandidateKey| {
            candidates
                .iter()
                .find(|c| c.agent_id == k.agent_id && c.option_id == k.option_id)
                .cloned()
        };
        Some(Portfolio {
            task_id: task_id.clone(),
            primary: find(&self.primary)?,
            backup: match &self.backup {
                Some(k) => Some(find(k)?),
                None => None,
            },
            backup_trigger_time: self.backup_trigger_time,
        })
    }
}

/// One task's slice of a clearing round, with enough context to recompute
/// every score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub round: u64,
    pub time: f64,
    pub mechanism: Mechanism,
    pub task_id: TaskId,
    /// The task as cleared, its deadline being the time remaining.
    pub task: Task,
    pub utility: UtilityConfig,
    pub risk: RiskConfig,
    pub solver: SolverConfig,
    pub reconstruction: ReconstructionConfig,
    pub candidates: Vec<Candidate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub evaluations: Vec<EvaluationRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bids: Vec<BidRow>,
    pub chosen: Option<Portfolio>,
}

impl DecisionRecord {
    /// The clearing configuration this record was scored under.
    pub fn clearing_config(&self) -> ClearingConfig {
        ClearingConfig {
            mechanism: self.mechanism,
            solver: self.solver.clone(),
            utility: self.utility.clone(),
            risk: self.risk.clone(),
            reconstruction: self.reconstruction,
            ..Default::default()
        }
    }
}

/// A report message as it crossed the wire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMessage {
    pub task_id: TaskId,
    pub agent_id: AgentId,
    pub option_id: OptionId,
    pub bytes: usize,
}

/// Output of one clearing round.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RoundResult {
    pub schedule: Schedule,
    pub decisions: Vec<DecisionRecord>,
    pub messages: Vec<ReportMessage>,
    /// Reports sent for each chosen candidate, keyed by task.
    pub sent_reports: BTreeMap<(TaskId, AgentId, OptionId), RiskReport>,
}

// ---------------------------------------------------------------------------
// Clearing
// ---------------------------------------------------------------------------

/// Portfolio scored for one task, ready for the solver.
#[derive(Debug, Clone)]
struct Scored {
    portfolio: Portfolio,
    evaluation: Evaluation,
    gain: f64,
}

fn rank_of(ranks: &BTreeMap<(AgentId, OptionId), usize>, c: &Candidate) -> usize {
    ranks.get(&c.key()).copied().unwrap_or(usize::MAX)
}

/// Total preference order: score desc, cost asc, primary reputation rank,
/// then candidate identifiers.
fn preference(
    a: &Scored,
    b: &Scored,
    ranks: &BTreeMap<(AgentId, OptionId), usize>,
) -> std::cmp::Ordering {
    let key = |s: &Scored| {
        (
            rank_of(ranks, &s.portfolio.primary),
            CandidateKey::from(&s.portfolio.primary),
            s.portfolio.backup.as_ref().map(CandidateKey::from),
        )
    };
    b.evaluation
        .score
        .total_cmp(&a.evaluation.score)
        .then(a.evaluation.cost.total_cmp(&b.evaluation.cost))
        .then_with(|| key(a).cmp(&key(b)))
}

fn reputation_ranks(
    sources: &ReportSources<'_>,
    keys: &BTreeSet<(AgentId, OptionId)>,
) -> BTreeMap<(AgentId, OptionId), usize> {
    let Some(ledger) = sources.ledger else {
        return BTreeMap::new();
    };
    let keys: Vec<_> = keys.iter().cloned().collect();
    reputation_rank(&keys, ledger.stats())
        .into_iter()
        .enumerate()
        .map(|(i, k)| (k, i))
        .collect()
}

/// Runs one round of the configured mechanism over the pending tasks.
pub fn clear_round(
    state: &ClearingState,
    cfg: &ClearingConfig,
    sources: &ReportSources<'_>,
) -> Result<RoundResult, ClearingError> {
    state.check_consistency()?;
    match cfg.mechanism {
        Mechanism::RocFull | Mechanism::RocLite | Mechanism::RocMin => {
            roc_clear(state, cfg, sources)
        }
        Mechanism::CentralNodl => baselines::central_nodl_clear(state, cfg, sources),
        Mechanism::Auction => baselines::scalar_auction_round(state, cfg, sources, false),
        Mechanism::ContractNet => baselines::scalar_auction_round(state, cfg, sources, true),
    }
}

/// The risk-aware global assignment over the pending tasks.
pub fn clear(
    state: &ClearingState,
    cfg: &ClearingConfig,
    sources: &ReportSources<'_>,
) -> Result<Schedule, ClearingError> {
    clear_round(state, cfg, sources).map(|r| r.schedule)
}

fn report_bytes(r: &RiskReport) -> usize {
    serde_json::to_vec(r).map(|v| v.len()).unwrap_or(0)
}

pub(crate) fn roc_clear(
    state: &ClearingState,
    cfg: &ClearingConfig,
    sources: &ReportSources<'_>,
) -> Result<RoundResult, ClearingError> {
    let tier = cfg.mechanism.report_tier();
    let now = state.now;
    let mut result = RoundResult {
        schedule: Schedule::empty(),
        ..Default::default()
    };
    if state.active_tasks.is_empty() {
        return Ok(result);
    }
    let tasks: Vec<Task> = state
        .active_tasks
        .values()
        .map(|t| t.remaining_at(now))
        .collect();

    let mut per_task: Vec<(Vec<EnumeratedCandidate>, Vec<Scored>, f64)> = Vec::new();
    let mut all_keys = BTreeSet::new();
    for task in &tasks {
        let cands = enumerate_with_reports(state, task, tier, cfg, sources);
        for c in &cands {
            all_keys.insert(c.candidate.key());
            if tier != Tier::Min {
                if let Some(r) = &c.sent {
                    result.messages.push(ReportMessage {
                        task_id: task.id.clone(),
                        agent_id: c.candidate.agent_id.clone(),
                        option_id: c.candidate.option_id.clone(),
                        bytes: report_bytes(r),
                    });
                }
            }
        }
        // candidates the agent could not report on are dropped
        let usable: Vec<EnumeratedCandidate> = cands
            .into_iter()
            .filter(|c| c.candidate.report.is_some())
            .collect();
        let plain: Vec<Candidate> = usable.iter().map(|c| c.candidate.clone()).collect();
        let laws: Vec<DiscreteOutcomeDistribution> = plain
            .iter()
            .map(|c| law_of(c, &cfg.reconstruction))
            .collect::<Result<_, _>>()?;
        let portfolios = build_with_laws(&plain, &laws, cfg.solver.allow_backups, task);
        let index: BTreeMap<(AgentId, OptionId), usize> = plain
            .iter()
            .enumerate()
            .map(|(i, c)| (c.key(), i))
            .collect();
        let null = null_score(task, cfg)?;
        let scored: Vec<Scored> = portfolios
            .into_par_iter()
            .map(|p| {
                let pi = index[&p.primary.key()];
                let bi = p.backup.as_ref().map(|b| index[&b.key()]);
                let e = evaluate_with_laws(&p, &laws[pi], bi.map(|i| &laws[i]), task, cfg)?;
                Ok(Scored {
                    gain: e.score - null,
                    portfolio: p,
                    evaluation: e,
                })
            })
            .collect::<Result<_, ClearingError>>()?;
        per_task.push((usable, scored, null));
    }

    let ranks = reputation_ranks(sources, &all_keys);
    for (_, scored, _) in per_task.iter_mut() {
        scored.sort_by(|a, b| preference(a, b, &ranks));
    }

    // solver problem over agent indices and resource pools
    let agent_index: BTreeMap<&AgentId, usize> = state
        .registry
        .keys()
        .enumerate()
        .map(|(i, a)| (a, i))
        .collect();
    let pools: Vec<&String> = state.resource_pools.keys().collect();
    let problem = Problem {
        choices: per_task
            .iter()
            .map(|(_, scored, _)| {
                scored
                    .iter()
                    .filter(|s| s.evaluation.feasible && s.gain > 0.0)
                    .map(|s| Choice {
                        gain: s.gain,
                        agents: s.portfolio.agents().map(|a| agent_index[a]).collect(),
                    })
                    .collect()
            })
            .collect(),
        demands: tasks
            .iter()
            .map(|t| {
                pools
                    .iter()
                    .map(|p| {
                        t.constraints
                            .resource_demands
                            .get(*p)
                            .copied()
                            .unwrap_or(0.0)
                    })
                    .collect()
            })
            .collect(),
        remaining: pools
            .iter()
            .map(|p| {
                let pool = &state.resource_pools[*p];
                pool.budget - pool.consumed
            })
            .collect(),
        capacity: vec![cfg.solver.agent_capacity; agent_index.len()],
        order: deadline_order(&tasks),
    };
    let assignment = solve(&problem, &cfg.solver)?;

    for (i, task) in tasks.iter().enumerate() {
        let (cands, scored, _) = &per_task[i];
        let feasible: Vec<&Scored> = scored
            .iter()
            .filter(|s| s.evaluation.feasible && s.gain > 0.0)
            .collect();
        let chosen = assignment.choice[i].map(|j| feasible[j]);
        if let Some(s) = chosen {
            result
                .schedule
                .portfolios
                .insert(task.id.clone(), s.portfolio.clone());
            result.schedule.diagnostics.insert(
                task.id.clone(),
                TaskDiagnostics {
                    score: s.evaluation.score,
                    expected_utility: s.evaluation.expected_utility,
                    risk_value: s.evaluation.risk_value,
                    slacks: s.evaluation.slacks.clone(),
                },
            );
            for c in std::iter::once(&s.portfolio.primary).chain(s.portfolio.backup.iter()) {
                let sent = cands
                    .iter()
                    .find(|e| e.candidate.key() == c.key())
                    .and_then(|e| e.sent.clone());
                if let Some(r) = sent {
                    result.sent_reports.insert(
                        (task.id.clone(), c.agent_id.clone(), c.option_id.clone()),
                        r,
                    );
                }
            }
        } else {
            result.schedule.unassigned.insert(task.id.clone());
        }
        result.decisions.push(DecisionRecord {
            round: state.round_counter,
            time: now,
            mechanism: cfg.mechanism,
            task_id: task.id.clone(),
            task: task.clone(),
            utility: cfg.utility.clone(),
            risk: cfg.risk.clone(),
            solver: cfg.solver.clone(),
            reconstruction: cfg.reconstruction,
            candidates: cands.iter().map(|c| c.candidate.clone()).collect(),
            evaluations: scored
                .iter()
                .map(|s| EvaluationRow {
                    primary: CandidateKey::from(&s.portfolio.primary),
                    backup: s.portfolio.backup.as_ref().map(CandidateKey::from),
                    backup_trigger_time: s.portfolio.backup_trigger_time,
                    evaluation: s.evaluation.clone(),
                })
                .collect(),
            bids: Vec::new(),
            chosen: chosen.map(|s| s.portfolio.clone()),
        });
    }
    result.schedule.objective_value = assignment.objective;
    result.schedule.feasible = true;
    Ok(result)
}

/// Task indices by absolute deadline, then id.
pub(crate) fn deadline_order(tasks: &[Task]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tasks.len()).collect();
    order.sort_by(|&a, &b| {
        tasks[a]
            .absolute_deadline()
            .total_cmp(&tasks[b].absolute_deadline())
            .then_with(|| tasks[a].id.cmp(&tasks[b].id))
    });
    order
}

/// Independent post-hoc check of a schedule against the state: every agent
/// registered, available and within capacity; resource budgets respected;
/// only pending tasks assigned.
pub fn validate_schedule(
    schedule: &Schedule,
    state: &ClearingState,
    agent_capacity: usize,
) -> Vec<String> {
    let mut v = Vec::new();
    for (tid, p) in &schedule.portfolios {
        if !state.active_tasks.contains_key(tid) {
            v.push(format!("task `{tid}` is not pending"));
        }
        if &p.task_id != tid {
            v.push(format!("portfolio for `{tid}` names task `{}`", p.task_id));
        }
        for a in p.agents() {
            if !state.registry.contains_key(a) {
                v.push(format!("agent `{a}` is not registered"));
            }
            if state.busy.contains_key(a) {
                v.push(format!("agent `{a}` is busy"));
            }
            if state.unavailable.contains_key(a) {
                v.push(format!("agent `{a}` is unavailable"));
            }
        }
        if let Some(b) = &p.backup {
            if b.agent_id == p.primary.agent_id {
                v.push(format!("task `{tid}` uses agent `{}` twice", b.agent_id));
            }
        }
    }
    for a in schedule.capacity_violations(agent_capacity) {
        v.push(format!("agent `{a}` exceeds capacity {agent_capacity}"));
    }
    for (name, pool) in &state.resource_pools {
        let used: f64 = schedule
            .portfolios
            .keys()
            .filter_map(|t| state.active_tasks.get(t))
            .map(|t| {
                t.constraints
                    .resource_demands
                    .get(name)
                    .copied()
                    .unwrap_or(0.0)
            })
            .sum();
        if pool.consumed + used > pool.budget + 1e-9 {
            v.push(format!("resource pool `{name}` over budget"));
        }
    }
    v
}

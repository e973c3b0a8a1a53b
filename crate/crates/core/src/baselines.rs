//! Comparison mechanisms: a scalar-cost auction, Contract Net with
//! self-interested declines, and a risk-neutral central scheduler.
//!
//! The auction and Contract Net only ever see [`ScalarProposal`]s, so no
//! tail information beyond the mean reaches them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::clearinghouse::{
    deadline_order, enumerate_with_reports, roc_clear, CandidateKey, ClearingConfig, ClearingError,
    ClearingState, DecisionRecord, ReportMessage, ReportSources, RoundResult,
};
use crate::distributions::{DistributionError, ReconstructionConfig, RiskReport};
use crate::model::{AgentId, Candidate, OptionId, Portfolio, Schedule, Task, TaskId, Tier};
use crate::risk::deadline_violation_prob;
use crate::util::hashed_unit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Weight of the option cost in an auction bid, in seconds per cost
    /// unit.
    pub bid_cost_weight: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            bid_cost_weight: 1.0,
        }
    }
}

/// What a bidder reveals: its expected completion time, its cost, and its
/// own estimate of missing the deadline (used only for declining).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarProposal {
    pub agent_id: AgentId,
    pub option_id: OptionId,
    pub expected_time: f64,
    pub cost: f64,
    pub violation_prob: f64,
}

impl ScalarProposal {
    /// Summarises an agent's own report for `task`.
    pub fn from_report(
        agent_id: AgentId,
        option_id: OptionId,
        cost: f64,
        report: &RiskReport,
        task: &Task,
        recon: &ReconstructionConfig,
    ) -> Result<Option<Self>, DistributionError> {
        let Some(law) = report.to_distribution(recon)? else {
            return Ok(None);
        };
        Ok(Some(Self {
            agent_id,
            option_id,
            expected_time: law.time_marginal().mean(),
            cost,
            violation_prob: deadline_violation_prob(&law, task.deadline),
        }))
    }
}

/// One row of a baseline round's audit table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BidRow {
    pub agent_id: AgentId,
    pub option_id: OptionId,
    pub expected_time: f64,
    pub cost: f64,
    pub bid: f64,
    #[serde(default)]
    pub declined: bool,
}

/// A task with its proposals, in the order received.
#[derive(Debug, Clone, PartialEq)]
pub struct BidTask {
    pub task: Task,
    pub proposals: Vec<ScalarProposal>,
}

/// How Contract Net bidders decide to decline an award.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeclineRule {
    pub seed: u64,
    pub round: u64,
}

impl DeclineRule {
    /// Declines with probability equal to the bidder's own predicted
    /// deadline-violation probability; the draw is a hash of the round,
    /// task and bidder so runs are reproducible.
    pub fn declines(&self, task: &TaskId, p: &ScalarProposal) -> bool {
        let u = hashed_unit(&[
            &self.seed.to_le_bytes(),
            &self.round.to_le_bytes(),
            task.as_str().as_bytes(),
            p.agent_id.as_str().as_bytes(),
            p.option_id.as_str().as_bytes(),
        ]);
        u < p.violation_prob
    }
}

/// Per-task award (index into the proposals) and audit rows.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Awards {
    pub winner: Vec<Option<usize>>,
    pub rows: Vec<Vec<BidRow>>,
}

fn pool_ok(task: &Task, remaining: &BTreeMap<String, f64>) -> bool {
    task.constraints
        .resource_demands
        .iter()
        .all(|(k, d)| remaining.get(k).is_none_or(|r| d <= &(r + 1e-9)))
}

fn consume(task: &Task, remaining: &mut BTreeMap<String, f64>) {
    for (k, d) in &task.constraints.resource_demands {
        if let Some(r) = remaining.get_mut(k) {
            *r -= d;
        }
    }
}

/// Runs awards over `tasks` in deadline order. Proposals are ranked by
/// `bid` ascending (ties by agent then option id); `decline` may reject an
/// award, passing it to the next proposal. Each agent wins at most one task.
fn award(
    tasks: &[BidTask],
    mut remaining: BTreeMap<String, f64>,
    bid: impl Fn(&ScalarProposal) -> f64,
    decline: Option<DeclineRule>,
) -> Awards {
    let plain: Vec<Task> = tasks.iter().map(|t| t.task.clone()).collect();
    let mut out = Awards {
        winner: vec![None; tasks.len()],
        rows: vec![Vec::new(); tasks.len()],
    };
    let mut taken: BTreeSet<AgentId> = BTreeSet::new();
    for i in deadline_order(&plain) {
        let bt = &tasks[i];
        let mut ranked: Vec<usize> = (0..bt.proposals.len()).collect();
        ranked.sort_by(|&a, &b| {
            let (pa, pb) = (&bt.proposals[a], &bt.proposals[b]);
            bid(pa)
                .total_cmp(&bid(pb))
                .then_with(|| pa.agent_id.cmp(&pb.agent_id))
                .then_with(|| pa.option_id.cmp(&pb.option_id))
        });
        let mut declined = BTreeSet::new();
        if pool_ok(&bt.task, &remaining) {
            for &j in &ranked {
                let p = &bt.proposals[j];
                if taken.contains(&p.agent_id) {
                    continue;
                }
                if decline.is_some_and(|d| d.declines(&bt.task.id, p)) {
                    declined.insert(j);
                    continue;
                }
                out.winner[i] = Some(j);
                taken.insert(p.agent_id.clone());
                consume(&bt.task, &mut remaining);
                break;
            }
        }
        out.rows[i] = ranked
            .iter()
            .map(|&j| {
                let p = &bt.proposals[j];
                BidRow {
                    agent_id: p.agent_id.clone(),
                    option_id: p.option_id.clone(),
                    expected_time: p.expected_time,
                    cost: p.cost,
                    bid: bid(p),
                    declined: declined.contains(&j),
                }
            })
            .collect();
    }
    out
}

/// Lowest bid `expected_time + w * cost` wins, tasks in deadline order,
/// one task per agent, no backups and no risk term.
pub fn scalar_auction_clear(
    tasks: &[BidTask],
    pools: BTreeMap<String, f64>,
    cfg: &BaselineConfig,
) -> Awards {
    let w = cfg.bid_cost_weight;
    award(tasks, pools, |p| p.expected_time + w * p.cost, None)
}

/// Awards by earliest expected completion; an awarded bidder declines with
/// probability equal to its own predicted deadline-violation probability.
pub fn contract_net_clear(
    tasks: &[BidTask],
    pools: BTreeMap<String, f64>,
    rule: Option<DeclineRule>,
) -> Awards {
    award(tasks, pools, |p| p.expected_time, rule)
}

fn scalar_schedule(tasks: &[BidTask], awards: &Awards) -> Schedule {
    let mut s = Schedule::empty();
    for (i, bt) in tasks.iter().enumerate() {
        match awards.winner[i] {
            Some(j) => {
                let p = &bt.proposals[j];
                s.portfolios.insert(
                    bt.task.id.clone(),
                    Portfolio {
                        task_id: bt.task.id.clone(),
                        primary: Candidate {
                            agent_id: p.agent_id.clone(),
                            option_id: p.option_id.clone(),
                            cost: p.cost,
                            report: None,
                        },
                        backup: None,
                        backup_trigger_time: None,
                    },
                );
            }
            None => {
                s.unassigned.insert(bt.task.id.clone());
            }
        }
    }
    s
}

/// One auction or Contract Net round over the pending tasks. Agents build
/// their proposals from their own full report; only the proposal crosses
/// the wire.
pub(crate) fn scalar_auction_round(
    state: &ClearingState,
    cfg: &ClearingConfig,
    sources: &ReportSources<'_>,
    contract_net: bool,
) -> Result<RoundResult, ClearingError> {
    let own = ReportSources::agents_only(sources.agents);
    let mut result = RoundResult {
        schedule: Schedule::empty(),
        ..Default::default()
    };
    let mut tasks = Vec::new();
    let mut sent: Vec<BTreeMap<CandidateKey, RiskReport>> = Vec::new();
    for t in state.active_tasks.values() {
        let task = t.remaining_at(state.now);
        let mut proposals = Vec::new();
        let mut reports = BTreeMap::new();
        for c in enumerate_with_reports(state, &task, Tier::Full, cfg, &own) {
            let Some(r) = &c.sent else { continue };
            let Some(p) = ScalarProposal::from_report(
                c.candidate.agent_id.clone(),
                c.candidate.option_id.clone(),
                c.candidate.cost,
                r,
                &task,
                &cfg.reconstruction,
            )?
            else {
                continue;
            };
            result.messages.push(ReportMessage {
                task_id: task.id.clone(),
                agent_id: p.agent_id.clone(),
                option_id: p.option_id.clone(),
                bytes: serde_json::to_vec(&p).map(|v| v.len()).unwrap_or(0),
            });
            reports.insert(CandidateKey::from(&c.candidate), r.clone());
            proposals.push(p);
        }
        tasks.push(BidTask { task, proposals });
        sent.push(reports);
    }
    let pools: BTreeMap<String, f64> = state
        .resource_pools
        .iter()
        .map(|(k, p)| (k.clone(), p.budget - p.consumed))
        .collect();
    let awards = if contract_net {
        let rule = DeclineRule {
            seed: cfg.seed,
            round: state.round_counter,
        };
        contract_net_clear(&tasks, pools, Some(rule))
    } else {
        scalar_auction_clear(&tasks, pools, &cfg.baseline)
    };
    result.schedule = scalar_schedule(&tasks, &awards);
    for (i, bt) in tasks.iter().enumerate() {
        let chosen = result.schedule.portfolios.get(&bt.task.id).cloned();
        if let Some(p) = &chosen {
            if let Some(r) = sent[i].get(&CandidateKey::from(&p.primary)) {
                result.sent_reports.insert(
                    (
                        bt.task.id.clone(),
                        p.primary.agent_id.clone(),
                        p.primary.option_id.clone(),
                    ),
                    r.clone(),
                );
            }
        }
        result.decisions.push(DecisionRecord {
            round: state.round_counter,
            time: state.now,
            mechanism: cfg.mechanism,
            task_id: bt.task.id.clone(),
            task: bt.task.clone(),
            utility: cfg.utility.clone(),
            risk: cfg.risk.clone(),
            solver: cfg.solver.clone(),
            reconstruction: cfg.reconstruction,
            candidates: bt
                .proposals
                .iter()
                .map(|p| Candidate {
                    agent_id: p.agent_id.clone(),
                    option_id: p.option_id.clone(),
                    cost: p.cost,
                    report: None,
                })
                .collect(),
            evaluations: Vec::new(),
            bids: awards.rows[i].clone(),
            chosen,
        });
    }
    // bids are costs, so the auction objective is their negated sum
    result.schedule.objective_value = -tasks
        .iter()
        .enumerate()
        .filter_map(|(i, bt)| {
            let p = &bt.proposals[awards.winner[i]?];
            awards.rows[i]
                .iter()
                .find(|r| r.agent_id == p.agent_id && r.option_id == p.option_id)
                .map(|r| r.bid)
        })
        .sum::<f64>();
    Ok(result)
}

/// Risk-neutral central scheduler: the same clearing with `lambda = 0` and
/// chance constraints ignored. Reports are used as sent, without
/// recalibration.
pub fn central_nodl_config(cfg: &ClearingConfig) -> ClearingConfig {
    let mut c = cfg.clone();
    c.risk.lambda = 0.0;
    c.solver.enforce_constraints = false;
    c.recalibration.enabled = false;
    c
}

pub(crate) fn central_nodl_clear(
    state: &ClearingState,
    cfg: &ClearingConfig,
    sources: &ReportSources<'_>,
) -> Result<RoundResult, ClearingError> {
    let own = ReportSources::agents_only(sources.agents);
    roc_clear(state, &central_nodl_config(cfg), &own)
}

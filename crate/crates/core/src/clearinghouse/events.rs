//! State transitions of the clearinghouse and the re-clearing loop.

use serde::{Deserialize, Serialize};

use super::{
    clear_round, ClearingConfig, ClearingError, ClearingState, Execution, ReportMessage,
    ReportSources,
};
use crate::calibration::LedgerRecord;
use crate::clearinghouse::DecisionRecord;
use crate::model::{
    AgentDescriptor, AgentId, DispatchMessage, OptionId, OutcomeReport, OutcomeVector, Portfolio,
    Schedule, Task, TaskId,
};

/// Something that changes what the clearinghouse knows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ClearingEvent {
    TaskArrival {
        task: Task,
    },
    /// An attempt finished; `attempt` is 0 for the primary, 1 for the
    /// backup.
    OutcomeReport {
        report: OutcomeReport,
        attempt: u32,
    },
    AgentFailure {
        agent_id: AgentId,
        #[serde(with = "crate::util::maybe_inf")]
        repair_at: f64,
    },
    BackupTrigger {
        task_id: TaskId,
    },
    AgentJoin {
        descriptor: AgentDescriptor,
    },
    AgentRepair {
        agent_id: AgentId,
    },
    Tick,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolutionKind {
    Completed,
    /// Deadline lapsed before any dispatch.
    Expired,
    /// Still open when the run ended.
    Truncated,
}

/// Final outcome of a task, with completion time measured from arrival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub task_id: TaskId,
    pub kind: ResolutionKind,
    pub outcome: OutcomeVector,
    pub resolved_at: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dispatch {
    pub message: DispatchMessage,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackupStart {
    pub task_id: TaskId,
    pub agent_id: AgentId,
    pub option_id: OptionId,
    pub at: f64,
}

/// Everything one event caused.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReclearOutcome {
    /// Assignment of the pending tasks; empty when nothing was pending.
    pub schedule: Schedule,
    pub decisions: Vec<DecisionRecord>,
    pub messages: Vec<ReportMessage>,
    pub dispatches: Vec<Dispatch>,
    pub backup_starts: Vec<BackupStart>,
    pub resolved: Vec<Resolution>,
    pub ledger_records: Vec<LedgerRecord>,
    /// The event referred to an attempt that had already ended.
    pub stale: bool,
}

fn strip_reports(p: &Portfolio) -> Portfolio {
    let mut p = p.clone();
    p.primary.report = None;
    if let Some(b) = p.backup.as_mut() {
        b.report = None;
    }
    p
}

struct Transition<'s> {
    state: &'s mut ClearingState,
    out: ReclearOutcome,
}

impl Transition<'_> {
    fn now(&self) -> f64 {
        self.state.now
    }

    fn free(&mut self, agent: &AgentId, task: &TaskId) {
        if self.state.busy.get(agent) == Some(task) {
            self.state.busy.remove(agent);
        }
    }

    fn log(
        &mut self,
        task: &TaskId,
        attempt: u32,
        agent: &AgentId,
        option: &OptionId,
        realized: OutcomeVector,
    ) {
        let exec = &self.state.executions[task];
        let report = if attempt == 0 {
            exec.primary_report.clone()
        } else {
            exec.backup_report.clone()
        };
        self.out.ledger_records.push(LedgerRecord {
            task_id: task.clone(),
            attempt,
            agent_id: agent.clone(),
            option_id: option.clone(),
            context: exec.task.context.clone(),
            report,
            realized,
            timestamp: self.state.now,
        });
    }

    fn resolve(
        &mut self,
        task: &TaskId,
        success: bool,
        metrics: std::collections::BTreeMap<String, f64>,
    ) {
        let now = self.now();
        let exec = self.state.executions.get_mut(task).expect("execution");
        exec.resolved = true;
        let outcome = OutcomeVector {
            completion_time: now - exec.task.arrival_time,
            success,
            metrics,
        };
        // a reserved backup that never started is released
        let reserved = exec
            .portfolio
            .backup
            .as_ref()
            .filter(|_| exec.backup_started_at.is_none())
            .map(|b| b.agent_id.clone());
        self.out.resolved.push(Resolution {
            task_id: task.clone(),
            kind: ResolutionKind::Completed,
            outcome,
            resolved_at: now,
        });
        if let Some(a) = reserved {
            self.free(&a, task);
        }
    }

    fn start_backup(&mut self, task: &TaskId) -> bool {
        let now = self.now();
        let exec = self.state.executions.get_mut(task).expect("execution");
        let Some(b) = exec.portfolio.backup.clone() else {
            return false;
        };
        if exec.backup_started_at.is_some() || exec.resolved {
            return false;
        }
        exec.backup_started_at = Some(now);
        exec.backup_running = true;
        self.out.backup_starts.push(BackupStart {
            task_id: task.clone(),
            agent_id: b.agent_id,
            option_id: b.option_id,
            at: now,
        });
        true
    }

    fn retire_if_done(&mut self, task: &TaskId) {
        if let Some(e) = self.state.executions.get(task) {
            if e.resolved && !e.primary_running && !e.backup_running {
                self.state.executions.remove(task);
                self.state.busy.retain(|_, t| t != task);
            }
        }
    }

    fn attempt_ended(
        &mut self,
        task: &TaskId,
        attempt: u32,
        agent: &AgentId,
        option: &OptionId,
        realized: OutcomeVector,
    ) {
        let Some(exec) = self.state.executions.get_mut(task) else {
            self.out.stale = true;
            return;
        };
        let running = if attempt == 0 {
            &mut exec.primary_running
        } else {
            &mut exec.backup_running
        };
        if !*running {
            self.out.stale = true;
            return;
        }
        *running = false;
        self.free(agent, task);
        self.log(task, attempt, agent, option, realized.clone());
        let exec = &self.state.executions[task];
        if exec.resolved {
            self.retire_if_done(task);
            return;
        }
        if attempt == 0 {
            let exec = self.state.executions.get_mut(task).expect("execution");
            exec.primary_outcome = Some(realized.clone());
            if exec.backup_started_at.is_none() {
                if realized.success {
                    self.resolve(task, true, realized.metrics);
                } else if !self.start_backup(task) {
                    self.resolve(task, false, realized.metrics);
                }
            }
            // after the trigger the task rides on the backup
        } else {
            let mut metrics = exec
                .primary_outcome
                .as_ref()
                .map(|o| o.metrics.clone())
                .unwrap_or_default();
            for (k, v) in &realized.metrics {
                metrics
                    .entry(k.clone())
                    .and_modify(|x| *x = x.max(*v))
                    .or_insert(*v);
            }
            self.resolve(task, realized.success, metrics);
        }
        self.retire_if_done(task);
    }

    fn agent_failed(&mut self, agent: &AgentId) {
        let Some(task) = self.state.busy.get(agent).cloned() else {
            return;
        };
        let exec = &self.state.executions[&task];
        let p = &exec.portfolio;
        if p.primary.agent_id == *agent && exec.primary_running {
            let opt = p.primary.option_id.clone();
            self.attempt_ended(&task, 0, agent, &opt, OutcomeVector::never_completed());
        } else if let Some(b) = p.backup.as_ref().filter(|b| b.agent_id == *agent) {
            let opt = b.option_id.clone();
            if exec.backup_running {
                self.attempt_ended(&task, 1, agent, &opt, OutcomeVector::never_completed());
            } else {
                // reserved backup lost before it was needed
                let exec = self.state.executions.get_mut(&task).expect("execution");
                exec.portfolio.backup = None;
                exec.portfolio.backup_trigger_time = None;
                self.free(agent, &task);
                let e = &self.state.executions[&task];
                if !e.resolved && !e.primary_running {
                    self.resolve(&task, false, Default::default());
                }
                self.retire_if_done(&task);
            }
        }
    }

    fn expire(&mut self) {
        let now = self.now();
        let lapsed: Vec<TaskId> = self
            .state
            .active_tasks
            .values()
            .filter(|t| t.absolute_deadline() <= now)
            .map(|t| t.id.clone())
            .collect();
        for id in lapsed {
            self.state.active_tasks.remove(&id);
            self.out.resolved.push(Resolution {
                task_id: id,
                kind: ResolutionKind::Expired,
                outcome: OutcomeVector::never_completed(),
                resolved_at: now,
            });
        }
    }
}

/// Applies `event` at `time`, then re-clears the pending tasks and
/// dispatches whatever the mechanism assigns. Executing portfolios are
/// never revoked.
pub fn reclear_on_event(
    state: &mut ClearingState,
    time: f64,
    event: ClearingEvent,
    cfg: &ClearingConfig,
    sources: &ReportSources<'_>,
) -> Result<ReclearOutcome, ClearingError> {
    if time < state.now {
        return Err(ClearingError::InconsistentState(format!(
            "event at {time} precedes clearing time {}",
            state.now
        )));
    }
    state.now = time;
    let mut tr = Transition {
        state,
        out: ReclearOutcome::default(),
    };
    match event {
        ClearingEvent::TaskArrival { task } => {
            if tr.state.active_tasks.contains_key(&task.id)
                || tr.state.executions.contains_key(&task.id)
            {
                return Err(ClearingError::InconsistentState(format!(
                    "task `{}` arrived twice",
                    task.id
                )));
            }
            tr.state.active_tasks.insert(task.id.clone(), task);
        }
        ClearingEvent::OutcomeReport { report, attempt } => {
            tr.attempt_ended(
                &report.task_id,
                attempt,
                &report.agent_id,
                &report.option_id,
                report.outcome,
            );
        }
        ClearingEvent::AgentFailure {
            agent_id,
            repair_at,
        } => {
            if tr.state.registry.contains_key(&agent_id) {
                tr.state.unavailable.insert(agent_id.clone(), repair_at);
                tr.agent_failed(&agent_id);
            }
        }
        ClearingEvent::BackupTrigger { task_id } => {
            let live = tr
                .state
                .executions
                .get(&task_id)
                .is_some_and(|e| e.primary_running && !e.resolved);
            if !(live && tr.start_backup(&task_id)) {
                tr.out.stale = true;
            }
        }
        ClearingEvent::AgentJoin { descriptor } => {
            tr.state.unavailable.remove(&descriptor.agent_id);
            tr.state
                .registry
                .insert(descriptor.agent_id.clone(), descriptor);
        }
        ClearingEvent::AgentRepair { agent_id } => {
            tr.state.unavailable.remove(&agent_id);
        }
        ClearingEvent::Tick => {}
    }
    tr.expire();
    let Transition { state, mut out } = tr;
    if state.active_tasks.is_empty() {
        out.schedule = Schedule::empty();
        return Ok(out);
    }

    let round = clear_round(state, cfg, sources)?;
    state.round_counter += 1;
    for (tid, portfolio) in &round.schedule.portfolios {
        let task = state
            .active_tasks
            .remove(tid)
            .ok_or_else(|| ClearingError::UnknownTask(tid.clone()))?;
        for (name, d) in &task.constraints.resource_demands {
            if let Some(pool) = state.resource_pools.get_mut(name) {
                pool.consumed += d;
            }
        }
        for a in portfolio.agents() {
            state.busy.insert(a.clone(), tid.clone());
        }
        let sent = |c: &crate::model::Candidate| {
            round
                .sent_reports
                .get(&(tid.clone(), c.agent_id.clone(), c.option_id.clone()))
                .cloned()
        };
        state.executions.insert(
            tid.clone(),
            Execution {
                task: task.clone(),
                portfolio: portfolio.clone(),
                dispatched_at: state.now,
                primary_report: sent(&portfolio.primary),
                backup_report: portfolio.backup.as_ref().and_then(sent),
                primary_running: true,
                backup_started_at: None,
                backup_running: false,
                primary_outcome: None,
                resolved: false,
            },
        );
        out.dispatches.push(Dispatch {
            message: DispatchMessage {
                task_id: tid.clone(),
                portfolio: strip_reports(portfolio),
            },
            task,
        });
    }
    out.schedule = round.schedule;
    out.decisions = round.decisions;
    out.messages = round.messages;
    Ok(out)
}

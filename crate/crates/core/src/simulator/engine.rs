//! The event loop.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::AgentProfile;
use crate::calibration::{fit_empirical_model, CalibrationLedger, EmpiricalModel};
use crate::clearinghouse::{
    reclear_on_event, CandidateKey, ClearingConfig, ClearingEvent, ClearingState, DecisionRecord,
    Mechanism, ReclearOutcome, ReportSources, Resolution, ResolutionKind, ResourcePool,
};
use crate::model::{
    AgentId, OptionId, OutcomeReport, OutcomeVector, Task, TaskAnnouncement, TaskId,
};
use crate::risk::{empirical_risk, realized_risk_sample, utility};
use crate::util::stable_hash;

use super::{EventRecord, LoggedEvent, MetricsReport, RosterChange, ScenarioConfig, SimError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Keep the per-round decision log. Grids turn this off.
    pub record_decisions: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            record_decisions: true,
        }
    }
}

/// Wall-clock and volume figures that are not part of the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDiagnostics {
    pub clearing_wall_seconds: f64,
    pub events_processed: u64,
}

/// How one task ended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: Task,
    pub kind: ResolutionKind,
    /// Completion time measured from arrival.
    pub outcome: OutcomeVector,
    pub resolved_at: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_dispatch: Option<f64>,
    /// Primary cost plus backup cost if the backup ran.
    pub cost: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: MetricsReport,
    pub events: Vec<EventRecord>,
    pub ledger: CalibrationLedger,
    pub decisions: Vec<DecisionRecord>,
    pub tasks: Vec<TaskResult>,
    pub diagnostics: RunDiagnostics,
}

#[derive(Debug, Clone)]
enum SimEvent {
    Arrival(Task),
    Completion { report: OutcomeReport, attempt: u32 },
    Trigger(TaskId),
    Failure(AgentId),
    Repair(AgentId),
    Roster(RosterChange),
    Tick,
}

#[derive(Debug)]
struct Queued {
    time: f64,
    seq: u64,
    event: SimEvent,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // reversed so that the max-heap pops the earliest (time, seq)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.seq.cmp(&self.seq))
    }
}

struct Track {
    task: Task,
    first_dispatch: Option<f64>,
    cost: f64,
    resolution: Option<Resolution>,
}

fn stream(seed: u64, label: &str, parts: &[&[u8]]) -> ChaCha8Rng {
    let seed_bytes = seed.to_le_bytes();
    let mut all: Vec<&[u8]> = vec![label.as_bytes(), &seed_bytes];
    all.extend_from_slice(parts);
    ChaCha8Rng::seed_from_u64(stable_hash(&all))
}

fn exponential<R: Rng + ?Sized>(rng: &mut R, rate: f64) -> f64 {
    -(1.0 - rng.random::<f64>()).ln() / rate
}

fn json_len<T: Serialize>(v: &T) -> usize {
    serde_json::to_vec(v).map(|b| b.len()).unwrap_or(0)
}

/// Poisson arrivals of every template up to the horizon, merged in time
/// order and numbered. Depends only on the seed and the templates, so all
/// mechanisms face the same task stream.
fn generate_arrivals(cfg: &ScenarioConfig) -> Vec<Task> {
    let mut all = Vec::new();
    for (i, t) in cfg.task_templates.iter().enumerate() {
        if t.rate_per_hour <= 0.0 {
            continue;
        }
        let mut rng = stream(cfg.seed, "arrivals", &[&(i as u64).to_le_bytes()]);
        let rate = t.rate_per_hour / 3600.0;
        let mut at = 0.0;
        loop {
            at += exponential(&mut rng, rate);
            if at > cfg.horizon {
                break;
            }
            all.push((at, i, t.instantiate(TaskId::from(""), at, &mut rng)));
        }
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    if let Some(m) = cfg.max_tasks {
        all.truncate(m);
    }
    all.into_iter()
        .enumerate()
        .map(|(k, (_, _, mut task))| {
            task.id = TaskId::from(format!("task-{k:05}").as_str());
            task
        })
        .collect()
}

struct Engine<'c> {
    cfg: &'c ScenarioConfig,
    ccfg: ClearingConfig,
    options: RunOptions,
    profiles: BTreeMap<AgentId, AgentProfile>,
    state: ClearingState,
    ledger: CalibrationLedger,
    model: Option<EmpiricalModel>,
    unfit: usize,
    queue: BinaryHeap<Queued>,
    seq: u64,
    events: Vec<EventRecord>,
    decisions: Vec<DecisionRecord>,
    tracks: BTreeMap<TaskId, Track>,
    sent: BTreeSet<(TaskId, AgentId, OptionId)>,
    failure_rngs: BTreeMap<AgentId, ChaCha8Rng>,
    departed: BTreeSet<AgentId>,
    clearing_time: Duration,
    processed: u64,
    now: f64,
}

impl<'c> Engine<'c> {
    fn new(cfg: &'c ScenarioConfig, options: RunOptions) -> Result<Self, SimError> {
        let ccfg = cfg.clearing_config();
        let agents = cfg.agents()?;
        let profiles: BTreeMap<AgentId, AgentProfile> = agents
            .iter()
            .map(|a| (a.descriptor.agent_id.clone(), a.clone()))
            .collect();
        let mut state = ClearingState::new(agents.iter().map(|a| a.descriptor.clone()));
        state.resource_pools = cfg
            .resource_pools
            .iter()
            .map(|(k, b)| {
                (
                    k.clone(),
                    ResourcePool {
                        budget: *b,
                        consumed: 0.0,
                    },
                )
            })
            .collect();
        Ok(Self {
            cfg,
            ledger: CalibrationLedger::new(ccfg.reconstruction),
            ccfg,
            options,
            profiles,
            state,
            model: None,
            unfit: 0,
            queue: BinaryHeap::new(),
            seq: 0,
            events: Vec::new(),
            decisions: Vec::new(),
            tracks: BTreeMap::new(),
            sent: BTreeSet::new(),
            failure_rngs: BTreeMap::new(),
            departed: BTreeSet::new(),
            clearing_time: Duration::ZERO,
            processed: 0,
            now: 0.0,
        })
    }

    fn push(&mut self, time: f64, event: SimEvent) {
        self.seq += 1;
        self.queue.push(Queued {
            time,
            seq: self.seq,
            event,
        });
    }

    fn log(&mut self, event: LoggedEvent) {
        self.events.push(EventRecord {
            time: self.now,
            event,
        });
    }

    /// Schedules the next breakdown of `agent` from its own stream.
    fn schedule_failure(&mut self, agent: &AgentId) {
        let Some(p) = self.profiles.get(agent) else {
            return;
        };
        let rate_per_hour = p.failure_rate;
        if rate_per_hour <= 0.0 {
            return;
        }
        let seed = self.cfg.seed;
        let rng = self
            .failure_rngs
            .entry(agent.clone())
            .or_insert_with(|| stream(seed, "failures", &[agent.as_str().as_bytes()]));
        // hazard whose one-hour breakdown probability is `failure_rate`
        let hazard = -(1.0 - rate_per_hour.min(1.0 - 1e-12)).ln() / 3600.0;
        let at = self.now + exponential(rng, hazard);
        self.push(at, SimEvent::Failure(agent.clone()));
    }

    /// Draws one execution outcome. The stream depends on the task,
    /// attempt and option only, so every mechanism that makes the same
    /// choice sees the same outcome.
    fn draw(
        &self,
        task: &Task,
        attempt: u32,
        agent: &AgentId,
        option: &OptionId,
    ) -> Result<OutcomeVector, SimError> {
        let mut rng = stream(
            self.cfg.seed,
            "execution",
            &[
                task.id.as_str().as_bytes(),
                &attempt.to_le_bytes(),
                agent.as_str().as_bytes(),
                option.as_str().as_bytes(),
            ],
        );
        let profile = self
            .profiles
            .get(agent)
            .ok_or_else(|| SimError::Config(format!("agent `{agent}` has no simulated profile")))?;
        Ok(profile.execute(option, &task.context, &mut rng)?)
    }

    /// Starts an attempt: schedules its outcome report. An attempt that
    /// would never complete is abandoned at the task deadline.
    fn start_attempt(
        &mut self,
        task: &Task,
        attempt: u32,
        agent: &AgentId,
        option: &OptionId,
    ) -> Result<(), SimError> {
        let outcome = self.draw(task, attempt, agent, option)?;
        let at = if outcome.completion_time.is_finite() {
            self.now + outcome.completion_time
        } else {
            task.absolute_deadline().max(self.now)
        };
        let report = OutcomeReport {
            task_id: task.id.clone(),
            agent_id: agent.clone(),
            option_id: option.clone(),
            outcome,
        };
        self.push(at, SimEvent::Completion { report, attempt });
        Ok(())
    }

    fn refit_if_needed(&mut self) -> Result<(), SimError> {
        if self.ccfg.mechanism != Mechanism::RocMin {
            return Ok(());
        }
        if self.model.is_none() || self.unfit >= self.cfg.learning.refit_every.max(1) {
            self.model = Some(fit_empirical_model(
                &self.ledger,
                &self.cfg.learning.model,
                &self.ccfg.reconstruction,
            )?);
            self.unfit = 0;
        }
        Ok(())
    }

    fn step(&mut self, time: f64, event: SimEvent) -> Result<(), SimError> {
        self.now = time;
        self.processed += 1;
        let cev = match event {
            SimEvent::Arrival(task) => {
                let bytes = json_len(&TaskAnnouncement(task.clone()));
                self.log(LoggedEvent::TaskAnnouncement {
                    task_id: task.id.clone(),
                    bytes,
                });
                self.tracks.insert(
                    task.id.clone(),
                    Track {
                        task: task.clone(),
                        first_dispatch: None,
                        cost: 0.0,
                        resolution: None,
                    },
                );
                ClearingEvent::TaskArrival { task }
            }
            SimEvent::Completion { report, attempt } => {
                ClearingEvent::OutcomeReport { report, attempt }
            }
            SimEvent::Trigger(task_id) => ClearingEvent::BackupTrigger { task_id },
            SimEvent::Failure(agent_id) => {
                if self.departed.contains(&agent_id) {
                    return Ok(());
                }
                let repair_at = time + self.cfg.repair_time;
                if repair_at.is_finite() {
                    self.push(repair_at, SimEvent::Repair(agent_id.clone()));
                }
                self.log(LoggedEvent::AgentFailure {
                    agent_id: agent_id.clone(),
                });
                ClearingEvent::AgentFailure {
                    agent_id,
                    repair_at,
                }
            }
            SimEvent::Repair(agent_id) => {
                if self.departed.contains(&agent_id) {
                    return Ok(());
                }
                self.log(LoggedEvent::AgentRepair {
                    agent_id: agent_id.clone(),
                });
                self.schedule_failure(&agent_id);
                ClearingEvent::AgentRepair { agent_id }
            }
            SimEvent::Roster(RosterChange::Join { agent }) => {
                let id = agent.descriptor.agent_id.clone();
                let descriptor = agent.descriptor.clone();
                self.departed.remove(&id);
                self.profiles.insert(id.clone(), agent);
                self.log(LoggedEvent::AgentJoin {
                    agent_id: id.clone(),
                });
                self.schedule_failure(&id);
                ClearingEvent::AgentJoin { descriptor }
            }
            SimEvent::Roster(RosterChange::Leave { agent_id }) => {
                self.departed.insert(agent_id.clone());
                self.log(LoggedEvent::AgentLeave {
                    agent_id: agent_id.clone(),
                });
                ClearingEvent::AgentFailure {
                    agent_id,
                    repair_at: f64::INFINITY,
                }
            }
            SimEvent::Tick => {
                let next = time + self.cfg.clear_interval;
                if next <= self.cfg.horizon {
                    self.push(next, SimEvent::Tick);
                }
                ClearingEvent::Tick
            }
        };
        self.refit_if_needed()?;
        let started = Instant::now();
        let sources = ReportSources {
            agents: &self.profiles,
            model: self.model.as_ref(),
            ledger: Some(&self.ledger),
        };
        let out = reclear_on_event(&mut self.state, time, cev, &self.ccfg, &sources)?;
        self.clearing_time += started.elapsed();
        self.absorb(out)
    }

    fn absorb(&mut self, out: ReclearOutcome) -> Result<(), SimError> {
        for m in out.messages {
            let key = (m.task_id.clone(), m.agent_id.clone(), m.option_id.clone());
            if self.sent.insert(key) {
                self.log(LoggedEvent::RiskReport {
                    task_id: m.task_id,
                    agent_id: m.agent_id,
                    option_id: m.option_id,
                    bytes: m.bytes,
                });
            }
        }
        for rec in out.ledger_records {
            let report = OutcomeReport {
                task_id: rec.task_id.clone(),
                agent_id: rec.agent_id.clone(),
                option_id: rec.option_id.clone(),
                outcome: rec.realized.clone(),
            };
            self.log(LoggedEvent::OutcomeReport {
                task_id: rec.task_id.clone(),
                agent_id: rec.agent_id.clone(),
                option_id: rec.option_id.clone(),
                attempt: rec.attempt,
                success: rec.realized.success,
                completion_time: rec.realized.completion_time,
                bytes: json_len(&report),
            });
            self.ledger.record_outcome(rec)?;
            self.unfit += 1;
        }
        for r in out.resolved {
            self.log(LoggedEvent::TaskResolved {
                task_id: r.task_id.clone(),
                kind: r.kind,
                success: r.outcome.success,
                completion_time: r.outcome.completion_time,
            });
            if let Some(t) = self.tracks.get_mut(&r.task_id) {
                t.resolution = Some(r);
            }
        }
        for d in out.dispatches {
            let p = &d.message.portfolio;
            self.log(LoggedEvent::DispatchMessage {
                task_id: d.message.task_id.clone(),
                primary: CandidateKey::from(&p.primary),
                backup: p.backup.as_ref().map(CandidateKey::from),
                backup_trigger_time: p.backup_trigger_time,
                bytes: json_len(&d.message),
            });
            if let Some(t) = self.tracks.get_mut(&d.task.id) {
                t.first_dispatch.get_or_insert(self.now);
                t.cost += p.primary.cost;
            }
            let (agent, option) = (p.primary.agent_id.clone(), p.primary.option_id.clone());
            self.start_attempt(&d.task, 0, &agent, &option)?;
            if let (Some(_), Some(trigger)) = (&p.backup, p.backup_trigger_time) {
                self.push(self.now + trigger, SimEvent::Trigger(d.task.id.clone()));
            }
        }
        for b in out.backup_starts {
            self.log(LoggedEvent::BackupStart {
                task_id: b.task_id.clone(),
                agent_id: b.agent_id.clone(),
                option_id: b.option_id.clone(),
            });
            let exec = self.state.executions.get(&b.task_id).ok_or_else(|| {
                SimError::Config(format!("backup started for unknown task `{}`", b.task_id))
            })?;
            let task = exec.task.clone();
            let cost = exec.portfolio.backup.as_ref().map_or(0.0, |c| c.cost);
            if let Some(t) = self.tracks.get_mut(&b.task_id) {
                t.cost += cost;
            }
            self.start_attempt(&task, 1, &b.agent_id, &b.option_id)?;
        }
        if self.options.record_decisions {
            self.decisions.extend(out.decisions);
        }
        Ok(())
    }

    /// Closes the run: everything still open is truncated at the horizon.
    fn finish(&mut self) {
        self.now = self.cfg.horizon;
        let open: Vec<TaskId> = self
            .tracks
            .iter()
            .filter(|(_, t)| t.resolution.is_none())
            .map(|(id, _)| id.clone())
            .collect();
        for id in open {
            let r = Resolution {
                task_id: id.clone(),
                kind: ResolutionKind::Truncated,
                outcome: OutcomeVector::never_completed(),
                resolved_at: self.cfg.horizon,
            };
            self.log(LoggedEvent::TaskResolved {
                task_id: id.clone(),
                kind: r.kind,
                success: false,
                completion_time: f64::INFINITY,
            });
            if let Some(t) = self.tracks.get_mut(&id) {
                t.resolution = Some(r);
            }
        }
    }

    fn results(&self) -> Vec<TaskResult> {
        self.tracks
            .values()
            .map(|t| {
                let r = t.resolution.as_ref().expect("resolved at finish");
                TaskResult {
                    task: t.task.clone(),
                    kind: r.kind,
                    outcome: r.outcome.clone(),
                    resolved_at: r.resolved_at,
                    first_dispatch: t.first_dispatch,
                    cost: t.cost,
                }
            })
            .collect()
    }

    fn metrics(&self, results: &[TaskResult]) -> Result<MetricsReport, SimError> {
        let n = results.len();
        let rate = |k: usize| (n > 0).then(|| k as f64 / n as f64);
        let count = |f: &dyn Fn(&TaskResult) -> bool| results.iter().filter(|r| f(r)).count();
        let ucfg = &self.ccfg.utility;
        let rcfg = &self.ccfg.risk;
        let utilities: Vec<f64> = results
            .iter()
            .map(|r| utility(&r.outcome, &r.task, ucfg, r.cost))
            .collect();
        let samples: Vec<f64> = results
            .iter()
            .map(|r| realized_risk_sample(&r.outcome, &r.task, ucfg, rcfg))
            .collect();
        let mean_utility = (n > 0).then(|| utilities.iter().sum::<f64>() / n as f64);
        let risk = empirical_risk(&samples, rcfg)?;
        let latencies: Vec<f64> = results
            .iter()
            .filter_map(|r| r.first_dispatch.map(|d| d - r.task.arrival_time))
            .collect();
        let (message_count, message_bytes) = self
            .events
            .iter()
            .filter_map(|e| e.event.message_bytes())
            .fold((0u64, 0u64), |(c, b), x| (c + 1, b + x as u64));
        Ok(MetricsReport {
            mechanism: self.ccfg.mechanism,
            seed: self.cfg.seed,
            lambda: rcfg.lambda,
            tasks: n,
            dispatched: count(&|r| r.first_dispatch.is_some()),
            completed: count(&|r| r.kind == ResolutionKind::Completed),
            expired: count(&|r| r.kind == ResolutionKind::Expired),
            truncated: count(&|r| r.kind == ResolutionKind::Truncated),
            mission_success_rate: rate(count(&|r| r.outcome.success)),
            deadline_violation_rate: rate(count(&|r| !r.outcome.on_time(r.task.deadline))),
            safety_violation_rate: rate(count(&|r| {
                r.task.constraints.metric_limits.iter().any(|l| {
                    r.outcome
                        .metrics
                        .get(&l.metric)
                        .is_some_and(|v| *v > l.limit)
                })
            })),
            mean_utility,
            empirical_risk: risk,
            risk_adjusted_utility: mean_utility.zip(risk).map(|(u, r)| u - rcfg.lambda * r),
            reassignment_latency: (!latencies.is_empty())
                .then(|| latencies.iter().sum::<f64>() / latencies.len() as f64),
            message_count,
            message_bytes,
            mean_brier: self.ledger.mean_brier(),
            mean_crps: self.ledger.mean_crps(),
            ledger_records: self.ledger.len(),
            rounds: self.state.round_counter,
        })
    }
}

/// Runs one scenario with the decision log kept.
pub fn run(cfg: &ScenarioConfig) -> Result<RunOutput, SimError> {
    run_with(cfg, RunOptions::default())
}

/// Runs one scenario. The result depends only on `cfg`.
pub fn run_with(cfg: &ScenarioConfig, options: RunOptions) -> Result<RunOutput, SimError> {
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(SimError::Config(problems.join("; ")));
    }
    let mut engine = Engine::new(cfg, options)?;
    for task in generate_arrivals(cfg) {
        engine.push(task.arrival_time, SimEvent::Arrival(task));
    }
    for ev in &cfg.roster_events {
        engine.push(ev.time, SimEvent::Roster(ev.change.clone()));
    }
    let ids: Vec<AgentId> = engine.profiles.keys().cloned().collect();
    for id in &ids {
        engine.schedule_failure(id);
    }
    engine.push(cfg.clear_interval, SimEvent::Tick);

    while let Some(q) = engine.queue.pop() {
        if q.time > cfg.horizon {
            break;
        }
        debug_assert!(q.time >= engine.now, "event time went backwards");
        engine.step(q.time, q.event)?;
    }
    engine.finish();
    let tasks = engine.results();
    let metrics = engine.metrics(&tasks)?;
    Ok(RunOutput {
        metrics,
        diagnostics: RunDiagnostics {
            clearing_wall_seconds: engine.clearing_time.as_secs_f64(),
            events_processed: engine.processed,
        },
        events: engine.events,
        ledger: engine.ledger,
        decisions: engine.decisions,
        tasks,
    })
}

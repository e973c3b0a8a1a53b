//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Every arithmetic check compares library output with a brute-force oracle
//! written here from the definitions, not with the library's own helpers.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roc_core::agents::Linear;
use roc_core::calibration::{
    chi_square_uniform, fit_empirical_model, pit_bin, randomized_pit, recalibrate,
    CalibrationLedger, LedgerRecord, ModelConfig, RecalibrationConfig,
};
use roc_core::clearinghouse::{
    clear_round, evaluate_portfolio, null_score, ClearingConfig, ReportProvider, ResourcePool,
};
use roc_core::distributions::{
    brier, compose_portfolio, crps, QuantilePoint, ReconstructionConfig, DEFAULT_SUPPORT_CAP,
};
use roc_core::model::{
    AgentKind, Clause, ConstraintSet, DispatchMessage, FeatureSource, FeatureValue, MetricLimit,
    OptionAdvertisement, OutcomeReport, TaskAnnouncement,
};
use roc_core::output::{replay_decision, single_point, write_jsonl, write_metrics_csv};
use roc_core::risk::{cvar, deadline_violation_prob, expected_utility, risk_value};
use roc_core::scenarios::{agent, heavy_tailed, lognormal, option, truth};
use roc_core::simulator::{run, run_with, GridRow, RunOptions};
use roc_core::{
    AgentDescriptor, AgentId, AgentProfile, Candidate, ClearingState, Context,
    DiscreteOutcomeDistribution, Marginal, Mechanism, OptionId, OptionSpec, OutcomeVector,
    Portfolio, QuantileSummary, ReportSources, ReportingProfile, RiskConfig, RiskMeasure,
    RiskReport, SolverMode, Task, TaskId, Tier, UtilityConfig,
};
use serde::de::DeserializeOwned;
use serde::Serialize;

struct Verdict {
    pass: bool,
    detail: String,
}

fn close(a: f64, b: f64) -> bool {
    a == b || (a - b).abs() <= 1e-9 * (1.0 + a.abs().max(b.abs()))
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

// ---------------------------------------------------------------------------
// Random instances
// ---------------------------------------------------------------------------

/// Raw weighted outcomes (normalized) plus the library law built from them.
fn random_law(
    rng: &mut ChaCha8Rng,
    max_atoms: usize,
    allow_never: bool,
) -> (Vec<(OutcomeVector, f64)>, DiscreteOutcomeDistribution) {
    let n = rng.random_range(1..=max_atoms);
    let mut items = Vec::with_capacity(n);
    for _ in 0..n {
        let mut t: f64 = rng.random_range(1.0..200.0);
        if rng.random_bool(0.3) {
            // coarse values make ties between atoms likely
            t = (t / 20.0).ceil() * 20.0;
        }
        let o = if allow_never && rng.random_bool(0.1) {
            OutcomeVector::never_completed()
        } else {
            OutcomeVector::new(t, rng.random_bool(0.8))
        };
        let o = o.with_metric("m", (rng.random_range(0.0..1.0f64) * 10.0).round() / 10.0);
        items.push((o, rng.random_range(0.05..1.0)));
    }
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    for (_, w) in &mut items {
        *w /= total;
    }
    let law = DiscreteOutcomeDistribution::from_weighted(items.clone()).expect("valid law");
    (items, law)
}

fn plain_task(id: &str, deadline: f64, constraints: ConstraintSet) -> Task {
    Task {
        id: id.into(),
        goal_label: "job".into(),
        context: Context::default(),
        deadline,
        constraints,
        arrival_time: 0.0,
    }
}

fn random_utility(rng: &mut ChaCha8Rng) -> UtilityConfig {
    UtilityConfig {
        success_weight: rng.random_range(0.5..2.0),
        lateness_weight: rng.random_range(0.0..2.0),
        violation_weights: BTreeMap::new(),
        default_violation_weight: rng.random_range(0.0..2.0),
        cost_weight: rng.random_range(0.0..0.5),
        lateness_cap: rng.random_range(1.0..10.0),
    }
}

// ---------------------------------------------------------------------------
// Oracles
// ---------------------------------------------------------------------------

fn oracle_utility(o: &OutcomeVector, d: f64, limit: f64, u: &UtilityConfig, cost: f64) -> f64 {
    let s = if o.success { u.success_weight } else { 0.0 };
    let late = if o.completion_time == f64::INFINITY {
        u.lateness_cap
    } else {
        let x = (o.completion_time - d) / d;
        if x < 0.0 {
            0.0
        } else if x > u.lateness_cap {
            u.lateness_cap
        } else {
            x
        }
    };
    let viol = match o.metrics.get("m") {
        Some(v) if *v > limit => u.default_violation_weight,
        _ => 0.0,
    };
    s - u.lateness_weight * late - viol - u.cost_weight * cost
}

/// `(1/alpha) * integral of the quantile function over [1 - alpha, 1]`.
fn oracle_cvar(values: &[(f64, f64)], alpha: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.0.total_cmp(&b.0));
    let start = 1.0 - alpha;
    let mut cum = 0.0;
    let mut acc = 0.0;
    for (i, (x, p)) in v.iter().enumerate() {
        let lo = cum;
        // the last atom closes the unit interval exactly
        let hi = if i + 1 == v.len() { 1.0 } else { cum + p };
        let overlap = (hi - lo.max(start)).max(0.0);
        acc += overlap * x;
        cum += p;
    }
    acc / alpha
}

/// `E|X - y| - E|X - X'| / 2` by double summation.
fn oracle_crps(values: &[(f64, f64)], y: f64) -> f64 {
    let a: f64 = values.iter().map(|(x, p)| p * (x - y).abs()).sum();
    let mut b = 0.0;
    for (x, p) in values {
        for (z, q) in values {
            b += p * q * (x - z).abs();
        }
    }
    a - b / 2.0
}

fn oracle_compose(
    primary: &[(OutcomeVector, f64)],
    backup: &[(OutcomeVector, f64)],
    trigger: f64,
) -> Vec<(OutcomeVector, f64)> {
    let mut out = Vec::new();
    for (a, p) in primary {
        if a.success && a.completion_time <= trigger {
            out.push((a.clone(), *p));
            continue;
        }
        for (b, q) in backup {
            let mut o = OutcomeVector::new(trigger + b.completion_time, b.success);
            let ma = a.metrics.get("m").copied().unwrap_or(f64::NEG_INFINITY);
            let mb = b.metrics.get("m").copied().unwrap_or(f64::NEG_INFINITY);
            o.metrics.insert("m".into(), ma.max(mb));
            out.push((o, p * q));
        }
    }
    out
}

/// Sup distance between two weighted samples' CDFs.
fn oracle_ks(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
    let mut pts: Vec<(f64, f64, f64)> = a
        .iter()
        .map(|(x, p)| (*x, *p, 0.0))
        .chain(b.iter().map(|(x, q)| (*x, 0.0, *q)))
        .collect();
    pts.sort_by(|l, r| l.0.total_cmp(&r.0));
    let (mut fa, mut fb, mut d) = (0.0f64, 0.0f64, 0.0f64);
    let mut i = 0;
    while i < pts.len() {
        let x = pts[i].0;
        while i < pts.len() && pts[i].0 == x {
            fa += pts[i].1;
            fb += pts[i].2;
            i += 1;
        }
        d = d.max((fa - fb).abs());
    }
    d
}

fn draw(items: &[(OutcomeVector, f64)], rng: &mut ChaCha8Rng) -> OutcomeVector {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (o, p) in items {
        cum += p;
        if u < cum {
            return o.clone();
        }
    }
    items.last().expect("non-empty").0.clone()
}

// ---------------------------------------------------------------------------
// 1. Risk math
// ---------------------------------------------------------------------------

fn risk_math() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let instances = 200;
    let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
    let mut fail = |k: &'static str| *failures.entry(k).or_default() += 1;
    let mut worst_ks = 0.0f64;
    for _ in 0..instances {
        let (items, law) = random_law(&mut rng, 16, true);
        let d = rng.random_range(10.0..200.0);
        let limit = rng.random_range(0.0..1.0);
        let u = random_utility(&mut rng);
        let cost = rng.random_range(0.0..3.0);
        let task = plain_task(
            "t",
            d,
            ConstraintSet {
                metric_limits: vec![MetricLimit {
                    metric: "m".into(),
                    limit,
                    confidence: 0.5,
                }],
                ..Default::default()
            },
        );

        let eu: f64 = items
            .iter()
            .map(|(o, p)| p * oracle_utility(o, d, limit, &u, cost))
            .sum();
        if !close(expected_utility(&law, &task, &u, cost), eu) {
            fail("expected utility");
        }

        let viol: f64 = items
            .iter()
            .filter(|(o, _)| !(o.success && o.completion_time <= d))
            .map(|(_, p)| p)
            .sum();
        if !close(deadline_violation_prob(&law, d), viol) {
            fail("deadline violation");
        }

        let alpha = [0.05, 0.1, 0.25, 0.5, 1.0][rng.random_range(0..5)];
        let metric: Vec<(f64, f64)> = items.iter().map(|(o, p)| (o.metrics["m"], *p)).collect();
        let m = Marginal::from_weighted(metric.iter().copied());
        if !close(cvar(&m, alpha).expect("level"), oracle_cvar(&metric, alpha)) {
            fail("cvar");
        }
        let normalized: Vec<(f64, f64)> = items
            .iter()
            .map(|(o, p)| ((o.completion_time / d).min(1.0 + u.lateness_cap), *p))
            .collect();
        let rcfg = RiskConfig {
            measure: RiskMeasure::CvarTime,
            cvar_level: alpha,
            lambda: 1.0,
        };
        if !close(
            risk_value(&law, &task, &u, &rcfg).expect("level"),
            oracle_cvar(&normalized, alpha),
        ) {
            fail("cvar of time");
        }

        let (finite, flaw) = random_law(&mut rng, 16, false);
        let times: Vec<(f64, f64)> = finite
            .iter()
            .map(|(o, p)| (o.completion_time, *p))
            .collect();
        let y = rng.random_range(1.0..250.0);
        if !close(crps(&flaw.time_marginal(), y), oracle_crps(&times, y)) {
            fail("crps");
        }
        let point = Marginal::point(y);
        let z = rng.random_range(1.0..250.0);
        if !close(crps(&point, z), (y - z).abs()) {
            fail("crps of a point");
        }

        let ps: f64 = items
            .iter()
            .filter(|(o, _)| o.success)
            .map(|(_, p)| p)
            .sum();
        let outcome = rng.random_bool(0.5);
        let o = if outcome { 1.0 } else { 0.0 };
        if !close(brier(law.success_prob(), outcome), (ps - o) * (ps - o)) {
            fail("brier");
        }

        // composition: exact against the pairwise oracle, and against Monte Carlo
        let (backup_items, backup) = random_law(&mut rng, 16, true);
        let trigger = rng.random_range(1.0..200.0);
        let composed = compose_portfolio(&law, Some(&backup), trigger, DEFAULT_SUPPORT_CAP);
        let exact = oracle_compose(&items, &backup_items, trigger);
        let lib_times: Vec<(f64, f64)> = composed
            .atoms()
            .iter()
            .map(|a| (a.outcome.completion_time, a.p))
            .collect();
        let exact_times: Vec<(f64, f64)> =
            exact.iter().map(|(o, p)| (o.completion_time, *p)).collect();
        let exact_s: f64 = exact
            .iter()
            .filter(|(o, _)| o.success)
            .map(|(_, p)| p)
            .sum();
        let exact_m: f64 = exact.iter().map(|(o, p)| p * o.metrics["m"]).sum();
        if oracle_ks(&lib_times, &exact_times) > 1e-9
            || !close(composed.success_prob(), exact_s)
            || !close(composed.expectation(|o| o.metrics["m"]), exact_m)
        {
            fail("composition (exact)");
        }
        let n = 100_000;
        let w = 1.0 / n as f64;
        let mc: Vec<(f64, f64)> = (0..n)
            .map(|_| {
                let a = draw(&items, &mut rng);
                if a.success && a.completion_time <= trigger {
                    (a.completion_time, w)
                } else {
                    (trigger + draw(&backup_items, &mut rng).completion_time, w)
                }
            })
            .collect();
        let ks = oracle_ks(&lib_times, &mc);
        worst_ks = worst_ks.max(ks);
        if ks > 0.02 {
            fail("composition (Monte Carlo)");
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = failures.is_empty() && secs < 10.0;
    Verdict {
        pass,
        detail: format!(
            "{instances} instances, mismatches {failures:?}, worst Monte Carlo Kolmogorov {worst_ks:.4}, {secs:.1} s (limit 10 s)"
        ),
    }
}

// ---------------------------------------------------------------------------
// Clearing fixtures
// ---------------------------------------------------------------------------

/// Full reports from a table keyed by (task, agent); absent pairs cannot
/// report.
struct TaskTable(BTreeMap<(TaskId, AgentId), DiscreteOutcomeDistribution>);

impl ReportProvider for TaskTable {
    fn report(&self, a: &AgentDescriptor, _: &OptionSpec, t: &Task, _: Tier) -> Option<RiskReport> {
        let d = self.0.get(&(t.id.clone(), a.agent_id.clone()))?;
        Some(RiskReport::Full { atoms: d.clone() })
    }
}

fn descriptor(id: &str, cost: f64) -> AgentDescriptor {
    let mut o = option("op", &[], cost);
    o.label = "op".into();
    AgentDescriptor {
        agent_id: id.into(),
        kind: AgentKind::Robot,
        options: vec![o],
        roles: Default::default(),
        state: Default::default(),
        tier: Tier::Full,
    }
}

/// Score of the never-completed law, from the definitions.
fn oracle_null(task: &Task, u: &UtilityConfig, r: &RiskConfig) -> f64 {
    let risk = match r.measure {
        RiskMeasure::DeadlineViolationProb => 1.0,
        RiskMeasure::CvarTime => 1.0 + u.lateness_cap,
        RiskMeasure::CvarMetric(_) => 0.0,
    };
    let _ = task;
    -u.lateness_weight * u.lateness_cap - r.lambda * risk
}

struct Instance {
    state: ClearingState,
    reports: TaskTable,
    cfg: ClearingConfig,
}

fn random_instance(rng: &mut ChaCha8Rng, max_tasks: usize) -> Instance {
    let n_agents = rng.random_range(2..=5);
    let agents: Vec<AgentDescriptor> = (0..n_agents)
        .map(|i| descriptor(&format!("a{i}"), rng.random_range(0.0..2.0)))
        .collect();
    let mut state = ClearingState::new(agents.clone());
    let n_tasks = rng.random_range(1..=max_tasks);
    let budget = rng.random_range(1..=3) as f64;
    state.resource_pools.insert(
        "kits".into(),
        ResourcePool {
            budget,
            consumed: 0.0,
        },
    );
    let mut table = BTreeMap::new();
    for t in 0..n_tasks {
        let mut constraints = ConstraintSet {
            deadline_confidence: [0.0, 0.3, 0.6][rng.random_range(0..3)],
            ..Default::default()
        };
        if rng.random_bool(0.5) {
            constraints.resource_demands.insert("kits".into(), 1.0);
        }
        let task = plain_task(&format!("t{t}"), rng.random_range(50.0..150.0), constraints);
        // at most four candidates per task
        let k = rng.random_range(1..=n_agents.min(4));
        let mut idx: Vec<usize> = (0..n_agents).collect();
        for i in 0..k {
            let j = rng.random_range(i..n_agents);
            idx.swap(i, j);
        }
        for &a in &idx[..k] {
            let (_, law) = random_law(rng, 8, true);
            table.insert((task.id.clone(), agents[a].agent_id.clone()), law);
        }
        state.active_tasks.insert(task.id.clone(), task);
    }
    let mut cfg = ClearingConfig::default();
    cfg.utility = random_utility(rng);
    cfg.risk = RiskConfig {
        measure: if rng.random_bool(0.5) {
            RiskMeasure::DeadlineViolationProb
        } else {
            RiskMeasure::CvarTime
        },
        cvar_level: 0.2,
        lambda: rng.random_range(0.0..3.0),
    };
    Instance {
        state,
        reports: TaskTable(table),
        cfg,
    }
}

// ---------------------------------------------------------------------------
// 2. Solver
// ---------------------------------------------------------------------------

/// Best total gain over every joint choice of logged feasible rows, agents
/// used at most once and the pool budget respected.
fn enumerate_best(
    rows: &[Vec<(f64, Vec<AgentId>, bool)>],
    i: usize,
    used: &mut Vec<AgentId>,
    kits_left: f64,
) -> f64 {
    if i == rows.len() {
        return 0.0;
    }
    let mut best = enumerate_best(rows, i + 1, used, kits_left);
    for (gain, agents, needs_kit) in &rows[i] {
        if agents.iter().any(|a| used.contains(a)) {
            continue;
        }
        let left = if *needs_kit {
            kits_left - 1.0
        } else {
            kits_left
        };
        if left < -1e-9 {
            continue;
        }
        let n = used.len();
        used.extend(agents.iter().cloned());
        best = best.max(gain + enumerate_best(rows, i + 1, used, left));
        used.truncate(n);
    }
    best
}

fn solver() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let instances = 200;
    let (mut mismatch, mut order_bad, mut ratio_bad) = (0, 0, 0);
    let mut worst_ratio = f64::INFINITY;
    let (mut sum_exh, mut sum_greedy) = (0.0, 0.0);
    for _ in 0..instances {
        let inst = random_instance(&mut rng, 3);
        let mut objective = BTreeMap::new();
        let mut rows = Vec::new();
        for mode in [
            SolverMode::Exhaustive,
            SolverMode::Greedy,
            SolverMode::GreedyPlusLocalSearch,
        ] {
            let mut cfg = inst.cfg.clone();
            cfg.solver.mode = mode;
            let round = clear_round(
                &inst.state,
                &cfg,
                &ReportSources::agents_only(&inst.reports),
            )
            .expect("clearing succeeds");
            // objective recomputed from the per-task diagnostics
            let total: f64 = round
                .schedule
                .diagnostics
                .iter()
                .map(|(t, d)| {
                    d.score - oracle_null(&inst.state.active_tasks[t], &cfg.utility, &cfg.risk)
                })
                .sum();
            if !close(total, round.schedule.objective_value) {
                mismatch += 1;
            }
            objective.insert(format!("{mode:?}"), total);
            if mode == SolverMode::Exhaustive {
                rows = round
                    .decisions
                    .iter()
                    .map(|d| {
                        let null = oracle_null(&d.task, &cfg.utility, &cfg.risk);
                        let kit = d.task.constraints.resource_demands.contains_key("kits");
                        d.evaluations
                            .iter()
                            .filter(|e| e.evaluation.feasible)
                            .map(|e| {
                                let mut agents = vec![e.primary.agent_id.clone()];
                                agents.extend(e.backup.iter().map(|b| b.agent_id.clone()));
                                (e.evaluation.score - null, agents, kit)
                            })
                            .collect()
                    })
                    .collect();
            }
        }
        let budget = inst.state.resource_pools["kits"].budget;
        let best = enumerate_best(&rows, 0, &mut Vec::new(), budget);
        let (exh, greedy, gls) = (
            objective["Exhaustive"],
            objective["Greedy"],
            objective["GreedyPlusLocalSearch"],
        );
        if !close(exh, best) {
            mismatch += 1;
        }
        if gls < greedy - 1e-12 {
            order_bad += 1;
        }
        sum_exh += exh;
        sum_greedy += greedy;
        if greedy < 0.6 * exh - 1e-12 {
            ratio_bad += 1;
        }
        if exh > 0.0 {
            worst_ratio = worst_ratio.min(greedy / exh);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    // the 0.6 bound holds on the summed objective; deadline-order greedy can
    // spend a later task's agent on an earlier task's backup, so single
    // instances may fall below it
    let ratio = sum_greedy / sum_exh;
    Verdict {
        pass: mismatch == 0 && order_bad == 0 && ratio >= 0.6 && secs < 30.0,
        detail: format!(
            "{instances} instances: exhaustive != enumeration {mismatch}, local search < greedy {order_bad}, greedy/exhaustive over the set {ratio:.3} (need >= 0.6; below 0.6 on {ratio_bad} single instances, worst {worst_ratio:.3}), {secs:.1} s (limit 30 s)"
        ),
    }
}

// ---------------------------------------------------------------------------
// 3. Lambda monotonicity
// ---------------------------------------------------------------------------

fn lambda_monotone() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let lambdas = [0.0, 0.5, 1.0, 2.0, 5.0, 10.0];
    let instances = 50;
    let (mut bad, mut moved) = (0, 0);
    for _ in 0..instances {
        let mut inst = random_instance(&mut rng, 1);
        inst.state.resource_pools.clear();
        for t in inst.state.active_tasks.values_mut() {
            t.constraints = ConstraintSet::default();
        }
        let mut risks = Vec::new();
        for &l in &lambdas {
            let mut cfg = inst.cfg.clone();
            cfg.solver.mode = SolverMode::Exhaustive;
            cfg.risk.lambda = l;
            let round = clear_round(
                &inst.state,
                &cfg,
                &ReportSources::agents_only(&inst.reports),
            )
            .expect("clearing succeeds");
            let d = &round.decisions[0];
            let risk = match round.schedule.diagnostics.get(&d.task_id) {
                Some(diag) => diag.risk_value,
                // unassigned: the never-completed law
                None => match cfg.risk.measure {
                    RiskMeasure::DeadlineViolationProb => 1.0,
                    _ => 1.0 + cfg.utility.lateness_cap,
                },
            };
            risks.push(risk);
        }
        if risks.windows(2).any(|w| w[1] > w[0] + 1e-12) {
            bad += 1;
        }
        if risks.first() != risks.last() {
            moved += 1;
        }
    }
    Verdict {
        pass: bad == 0,
        detail: format!(
            "{instances} single-task instances over lambda {lambdas:?}: {bad} non-monotone, {moved} with a risk change"
        ),
    }
}

// ---------------------------------------------------------------------------
// 4. Tail risk
// ---------------------------------------------------------------------------

fn tail_risk() -> Verdict {
    let start = Instant::now();
    let base = heavy_tailed();
    let quiet = RunOptions {
        record_decisions: false,
    };
    let mut diffs = Vec::new();
    let (mut roc_rates, mut auction_rates) = (Vec::new(), Vec::new());
    for seed in 1..=20 {
        let mut cfg = base.clone();
        cfg.seed = seed;
        cfg.mechanism = Mechanism::RocFull;
        let roc = run_with(&cfg, quiet).expect("run");
        cfg.mechanism = Mechanism::Auction;
        let auction = run_with(&cfg, quiet).expect("run");
        let r = roc.metrics.deadline_violation_rate.unwrap_or(0.0);
        let a = auction.metrics.deadline_violation_rate.unwrap_or(0.0);
        roc_rates.push(r);
        auction_rates.push(a);
        diffs.push(a - r);
    }
    let (d, se) = mean_stderr(&diffs);
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        pass: base.clearing.risk.lambda >= 1.0 && d >= 0.10,
        detail: format!(
            "violation rate roc_full {:.3} vs auction {:.3} over 20 seeds, paired difference {:.3} +- {:.3} (need >= 0.100), {secs:.1} s",
            mean_stderr(&roc_rates).0,
            mean_stderr(&auction_rates).0,
            d,
            se
        ),
    }
}

// ---------------------------------------------------------------------------
// 5. Calibration loop
// ---------------------------------------------------------------------------

fn calibration_loop() -> Verdict {
    let time = lognormal(Linear::constant(60.0).with("distance", 40.0), 0.5);
    let make = |id: &str, reporting: ReportingProfile| {
        let mut a = agent(
            id,
            AgentKind::Robot,
            Tier::Full,
            vec![(option("inspect", &[], 1.0), truth(time.clone(), 0.9))],
        );
        a.reporting = reporting;
        a
    };
    let honest = make("truthful", ReportingProfile::Truthful);
    let over = make(
        "overconfident",
        ReportingProfile::Overconfident {
            gamma: 0.5,
            delta: 0.05,
        },
    );
    let opt: OptionId = "inspect".into();
    let recon = ReconstructionConfig::default();
    let rcfg = RecalibrationConfig::default();
    let runs = 20;
    let tasks = 500;
    let (mut crps_ok, mut pit_ok) = (0, 0);
    let (mut chi_raw, mut chi_recal) = (Vec::new(), Vec::new());
    for seed in 0..runs {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let mut ledger = CalibrationLedger::new(recon);
        let mut raw_hist = [0u64; 10];
        let mut recal_hist = [0u64; 10];
        for i in 0..tasks {
            let ctx = Context::default().with("distance", rng.random_range(0.0..3.0));
            // both agents draw from one stream per task, so with identical
            // ground truth they realize the same outcome
            let stream = ChaCha8Rng::seed_from_u64(rng.random());
            for (k, a) in [&honest, &over].into_iter().enumerate() {
                let report = a.report(&opt, &ctx).expect("report");
                let realized = a.execute(&opt, &ctx, &mut stream.clone()).expect("execute");
                if k == 1 {
                    let stats = ledger.key_stats(&a.descriptor.agent_id, &opt);
                    if stats.is_some_and(|s| s.count >= rcfg.k_min)
                        && realized.completion_time.is_finite()
                    {
                        let recal =
                            recalibrate(&report, stats, &rcfg, &recon).expect("recalibrate");
                        let law = |r: &RiskReport| {
                            r.to_distribution(&recon)
                                .expect("law")
                                .expect("payload")
                                .time_marginal()
                        };
                        let v: f64 = rng.random();
                        let y = realized.completion_time;
                        raw_hist[pit_bin(randomized_pit(&law(&report), y, v))] += 1;
                        recal_hist[pit_bin(randomized_pit(&law(&recal), y, v))] += 1;
                    }
                }
                ledger
                    .record_outcome(LedgerRecord {
                        task_id: format!("task-{i}-{k}").into(),
                        attempt: 0,
                        agent_id: a.descriptor.agent_id.clone(),
                        option_id: opt.clone(),
                        context: ctx.clone(),
                        report: Some(report),
                        realized,
                        timestamp: i as f64,
                    })
                    .expect("record");
            }
        }
        let crps_of = |a: &AgentProfile| {
            ledger
                .key_stats(&a.descriptor.agent_id, &opt)
                .and_then(|s| s.mean_crps())
                .expect("scored")
        };
        if crps_of(&over) > crps_of(&honest) {
            crps_ok += 1;
        }
        let (r, c) = (
            chi_square_uniform(&raw_hist),
            chi_square_uniform(&recal_hist),
        );
        chi_raw.push(r);
        chi_recal.push(c);
        if c < r {
            pit_ok += 1;
        }
    }
    Verdict {
        pass: crps_ok * 100 >= 95 * runs && pit_ok * 100 >= 90 * runs,
        detail: format!(
            "{runs} runs of {tasks} tasks: overconfident CRPS higher in {crps_ok} (need 19), recalibrated PIT chi-square lower in {pit_ok} (need 18); mean chi-square raw {:.1} vs recalibrated {:.1}",
            mean_stderr(&chi_raw).0,
            mean_stderr(&chi_recal).0
        ),
    }
}

// ---------------------------------------------------------------------------
// 6. ROC-Min convergence
// ---------------------------------------------------------------------------

/// Mean ground-truth score gap between roc_min and roc_full on a probe task
/// after 50 and after 1000 logged executions, over 10 seeds.
fn min_gaps(model_cfg: &ModelConfig) -> (f64, f64) {
    let spec = |id: &str, median: f64, sigma: f64, success: f64, cost: f64| {
        agent(
            id,
            AgentKind::Robot,
            Tier::Min,
            vec![(
                option(&format!("{id}_run"), &[], cost),
                truth(lognormal(Linear::constant(median), sigma), success),
            )],
        )
    };
    let roster: BTreeMap<AgentId, AgentProfile> = [
        spec("sprinter", 30.0, 1.2, 0.9, 1.0),
        spec("steady", 80.0, 0.1, 0.97, 1.0),
        spec("slowpoke", 400.0, 0.2, 0.99, 0.5),
        spec("flaky", 40.0, 0.3, 0.5, 0.5),
    ]
    .into_iter()
    .map(|a| (a.descriptor.agent_id.clone(), a))
    .collect();
    let task = |i: usize| plain_task(&format!("t{i}"), 120.0, ConstraintSet::default());
    let state_for = |t: &Task| {
        let mut s = ClearingState::new(roster.values().map(|a| a.descriptor.clone()));
        s.active_tasks.insert(t.id.clone(), t.clone());
        s
    };
    let mut full_cfg = ClearingConfig::default();
    full_cfg.mechanism = Mechanism::RocFull;
    full_cfg.solver.mode = SolverMode::Exhaustive;
    let mut min_cfg = full_cfg.clone();
    min_cfg.mechanism = Mechanism::RocMin;
    let recon = ReconstructionConfig::default();

    // score of a portfolio under the agents' ground truth
    let truth_report = |c: &Candidate| -> Candidate {
        let law = roster[&c.agent_id]
            .generate_ground_truth(&c.option_id, &Context::default())
            .expect("truth");
        Candidate {
            report: Some(RiskReport::Full { atoms: law }),
            ..c.clone()
        }
    };
    let true_score = |p: Option<&Portfolio>, t: &Task| -> f64 {
        match p {
            None => null_score(t, &full_cfg).expect("null"),
            Some(p) => {
                let q = Portfolio {
                    primary: truth_report(&p.primary),
                    backup: p.backup.as_ref().map(truth_report),
                    ..p.clone()
                };
                evaluate_portfolio(&q, t, &full_cfg)
                    .expect("evaluate")
                    .score
            }
        }
    };
    let probe = task(usize::MAX);
    let full = clear_round(
        &state_for(&probe),
        &full_cfg,
        &ReportSources::agents_only(&roster),
    )
    .expect("clear");
    let best = true_score(full.schedule.portfolios.get(&probe.id), &probe);

    let (mut gaps50, mut gaps1000) = (Vec::new(), Vec::new());
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(600 + seed);
        let mut ledger = CalibrationLedger::new(recon);
        let mut model = fit_empirical_model(&ledger, model_cfg, &recon).expect("fit");
        let mut gap50 = None;
        let gap = |model: &_| {
            let sources = ReportSources {
                agents: &roster,
                model: Some(model),
                ledger: None,
            };
            let r = clear_round(&state_for(&probe), &min_cfg, &sources).expect("clear");
            best - true_score(r.schedule.portfolios.get(&probe.id), &probe)
        };
        for i in 0..20_000 {
            if gap50.is_none() && ledger.len() >= 50 {
                gap50 = Some(gap(&model));
            }
            if ledger.len() >= 1000 {
                break;
            }
            let t = task(i);
            let sources = ReportSources {
                agents: &roster,
                model: Some(&model),
                ledger: Some(&ledger),
            };
            let round = clear_round(&state_for(&t), &min_cfg, &sources).expect("clear");
            let Some(p) = round.schedule.portfolios.get(&t.id) else {
                continue;
            };
            let mut record = |c: &Candidate, attempt: u32, rng: &mut ChaCha8Rng| {
                let realized = roster[&c.agent_id]
                    .execute(&c.option_id, &t.context, rng)
                    .expect("execute");
                ledger
                    .record_outcome(LedgerRecord {
                        task_id: t.id.clone(),
                        attempt,
                        agent_id: c.agent_id.clone(),
                        option_id: c.option_id.clone(),
                        context: t.context.clone(),
                        report: c.report.clone(),
                        realized: realized.clone(),
                        timestamp: i as f64,
                    })
                    .expect("record");
                realized
            };
            let first = record(&p.primary, 0, &mut rng);
            let trigger = p.backup_trigger_time.unwrap_or(f64::INFINITY);
            if let Some(b) = &p.backup {
                if !(first.success && first.completion_time <= trigger) {
                    record(b, 1, &mut rng);
                }
            }
            model = fit_empirical_model(&ledger, model_cfg, &recon).expect("fit");
        }
        gaps50.push(gap50.expect("reached 50 executions"));
        gaps1000.push(gap(&model));
    }
    (mean_stderr(&gaps50).0, mean_stderr(&gaps1000).0)
}

fn min_convergence() -> Verdict {
    let start = Instant::now();
    // untried options must look at least as good as every real agent for the
    // 120 s deadline, or an agent that beats the prior stops the others from
    // ever being tried
    let optimistic = ModelConfig {
        prior: QuantileSummary {
            time_quantiles: [0.1, 0.25, 0.5, 0.75, 0.9, 0.95]
                .iter()
                .zip([5.0, 8.0, 12.0, 16.0, 20.0, 25.0])
                .map(|(&level, value)| QuantilePoint { level, value })
                .collect(),
            success_prob: 0.99,
            metric_quantiles: BTreeMap::new(),
            cost: 0.0,
        },
        ..ModelConfig::default()
    };
    let (g50, g1000) = min_gaps(&optimistic);
    let (d50, d1000) = min_gaps(&ModelConfig::default());
    let secs = start.elapsed().as_secs_f64();
    Verdict {
        pass: g1000 <= 0.5 * g50,
        detail: format!(
            "mean ground-truth score gap to roc_full over 10 seeds with a deadline-optimistic prior: {g50:.4} at 50 executions, {g1000:.4} at 1000 (need <= 50%); default prior {d50:.4} -> {d1000:.4}; {secs:.1} s"
        ),
    }
}

// ---------------------------------------------------------------------------
// 7. Determinism and replay
// ---------------------------------------------------------------------------

fn determinism() -> Verdict {
    let mut identical = true;
    let mut worst = 0.0f64;
    let mut replayed = 0usize;
    for (mut cfg, mech) in [
        (roc_core::scenarios::disaster_response(), Mechanism::RocFull),
        (roc_core::scenarios::disaster_response(), Mechanism::RocLite),
        (roc_core::scenarios::disaster_response(), Mechanism::RocMin),
        (roc_core::scenarios::disaster_response(), Mechanism::Auction),
        (heavy_tailed(), Mechanism::RocFull),
    ] {
        cfg.horizon = 3600.0;
        cfg.mechanism = mech;
        let bytes = |cfg: &roc_core::ScenarioConfig| {
            let out = run(cfg).expect("run");
            let mut metrics = Vec::new();
            write_metrics_csv(
                &mut metrics,
                &[GridRow {
                    point: single_point(cfg),
                    metrics: out.metrics.clone(),
                }],
            )
            .expect("csv");
            let mut log = Vec::new();
            write_jsonl(&mut log, &out.decisions).expect("jsonl");
            (metrics, log, out)
        };
        let (m1, l1, out) = bytes(&cfg);
        let (m2, l2, _) = bytes(&cfg);
        identical &= m1 == m2 && l1 == l2;
        for d in &out.decisions {
            for r in replay_decision(d).expect("replay") {
                replayed += 1;
                worst = worst
                    .max((r.logged.score - r.recomputed.score).abs())
                    .max((r.logged.expected_utility - r.recomputed.expected_utility).abs())
                    .max((r.logged.risk_value - r.recomputed.risk_value).abs());
            }
        }
    }
    Verdict {
        pass: identical && worst <= 1e-9 && replayed > 0,
        detail: format!(
            "repeated runs byte-identical: {identical}; {replayed} logged evaluations replayed, max difference {worst:e} (limit 1e-9)"
        ),
    }
}

// ---------------------------------------------------------------------------
// 8. Protocol round trips
// ---------------------------------------------------------------------------

fn word(rng: &mut ChaCha8Rng) -> String {
    let n = rng.random_range(1..8);
    (0..n)
        .map(|_| {
            let c = rng.random_range(0..40u8);
            match c {
                0..=25 => (b'a' + c) as char,
                26..=35 => (b'0' + c - 26) as char,
                36 => '-',
                37 => '"',
                38 => 'é',
                _ => '\\',
            }
        })
        .collect()
}

fn any_f64(rng: &mut ChaCha8Rng) -> f64 {
    match rng.random_range(0..4) {
        0 => rng.random_range(-1e6..1e6),
        1 => rng.random::<f64>() * 10f64.powi(rng.random_range(-300..300)),
        2 => f64::from_bits(rng.random::<u64>() >> 2),
        _ => rng.random_range(-10..10) as f64,
    }
}

fn random_context(rng: &mut ChaCha8Rng) -> Context {
    let mut c = Context {
        timestamp: any_f64(rng).abs(),
        ..Default::default()
    };
    for _ in 0..rng.random_range(0..4) {
        let v = if rng.random_bool(0.5) {
            FeatureValue::Num(any_f64(rng))
        } else {
            FeatureValue::Tag(word(rng))
        };
        c.features.insert(word(rng), v);
    }
    c
}

fn random_task(rng: &mut ChaCha8Rng) -> Task {
    let mut constraints = ConstraintSet {
        deadline_confidence: rng.random(),
        ..Default::default()
    };
    for _ in 0..rng.random_range(0..3) {
        constraints.required_roles.insert(word(rng));
        constraints.metric_limits.push(MetricLimit {
            metric: word(rng),
            limit: any_f64(rng),
            confidence: rng.random(),
        });
        constraints
            .resource_demands
            .insert(word(rng), any_f64(rng).abs());
    }
    Task {
        id: word(rng).into(),
        goal_label: word(rng),
        context: random_context(rng),
        deadline: rng.random_range(1e-3..1e6),
        constraints,
        arrival_time: rng.random_range(0.0..1e6),
    }
}

fn random_option(rng: &mut ChaCha8Rng) -> OptionSpec {
    let mut o = option(&word(rng), &[], any_f64(rng).abs());
    o.label = word(rng);
    for _ in 0..rng.random_range(0..3) {
        let (feature, value) = (word(rng), any_f64(rng));
        let source = if rng.random_bool(0.5) {
            FeatureSource::Context
        } else {
            FeatureSource::State
        };
        o.initiation.push(match rng.random_range(0..5) {
            0 => Clause::AtLeast {
                source,
                feature,
                value,
            },
            1 => Clause::Below {
                source,
                feature,
                value,
            },
            2 => Clause::Equals {
                source,
                feature,
                value: FeatureValue::Tag(word(rng)),
            },
            3 => Clause::OneOf {
                source,
                feature,
                values: vec![word(rng), word(rng)],
            },
            _ => Clause::HasRole { role: word(rng) },
        });
        o.roles_provided.insert(word(rng));
        o.metadata.insert(word(rng), word(rng));
    }
    o
}

fn random_outcome(rng: &mut ChaCha8Rng) -> OutcomeVector {
    let t = if rng.random_bool(0.1) {
        f64::INFINITY
    } else {
        rng.random_range(1e-3..1e6)
    };
    let mut o = OutcomeVector::new(t, rng.random_bool(0.5));
    for _ in 0..rng.random_range(0..3) {
        o.metrics.insert(word(rng), any_f64(rng));
    }
    o
}

fn random_report(rng: &mut ChaCha8Rng) -> RiskReport {
    match rng.random_range(0..3) {
        0 => {
            let (_, law) = random_law(rng, 16, true);
            RiskReport::Full { atoms: law }
        }
        1 => {
            let mut v = rng.random_range(0.1..100.0);
            let time_quantiles = [0.1, 0.25, 0.5, 0.75, 0.9, 0.95]
                .iter()
                .map(|&level| {
                    v += rng.random_range(0.0..50.0);
                    QuantilePoint { level, value: v }
                })
                .collect();
            RiskReport::Lite {
                summary: QuantileSummary {
                    time_quantiles,
                    success_prob: rng.random(),
                    metric_quantiles: BTreeMap::new(),
                    cost: any_f64(rng).abs(),
                },
            }
        }
        _ => RiskReport::Min,
    }
}

fn random_candidate(rng: &mut ChaCha8Rng) -> Candidate {
    Candidate {
        agent_id: word(rng).into(),
        option_id: word(rng).into(),
        cost: any_f64(rng).abs(),
        report: rng.random_bool(0.5).then(|| random_report(rng)),
    }
}

fn round_trips<T: Serialize + DeserializeOwned + PartialEq>(v: &T) -> bool {
    let a = serde_json::to_string(v).expect("encode");
    let Ok(back) = serde_json::from_str::<T>(&a) else {
        return false;
    };
    let b = serde_json::to_string(&back).expect("encode");
    a == b && back == *v
}

fn protocol_round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let n = 1000;
    let mut failures: BTreeMap<&str, usize> = BTreeMap::new();
    for _ in 0..n {
        let announcement = TaskAnnouncement(random_task(&mut rng));
        let advert = OptionAdvertisement {
            agent_id: word(&mut rng).into(),
            kind: [AgentKind::Human, AgentKind::Robot, AgentKind::Software][rng.random_range(0..3)],
            roles: (0..rng.random_range(0..3))
                .map(|_| word(&mut rng))
                .collect(),
            options: (0..rng.random_range(1..4))
                .map(|_| random_option(&mut rng))
                .collect(),
        };
        let report = random_report(&mut rng);
        let backup = rng.random_bool(0.5).then(|| random_candidate(&mut rng));
        let dispatch = DispatchMessage {
            task_id: word(&mut rng).into(),
            portfolio: Portfolio {
                task_id: word(&mut rng).into(),
                primary: random_candidate(&mut rng),
                backup_trigger_time: backup.as_ref().map(|_| rng.random_range(1e-3..1e5)),
                backup,
            },
        };
        let outcome = OutcomeReport {
            task_id: word(&mut rng).into(),
            agent_id: word(&mut rng).into(),
            option_id: word(&mut rng).into(),
            outcome: random_outcome(&mut rng),
        };
        for (name, ok) in [
            ("TaskAnnouncement", round_trips(&announcement)),
            ("OptionAdvertisement", round_trips(&advert)),
            ("RiskReport", round_trips(&report)),
            ("DispatchMessage", round_trips(&dispatch)),
            ("OutcomeReport", round_trips(&outcome)),
        ] {
            if !ok {
                *failures.entry(name).or_default() += 1;
            }
        }
    }
    Verdict {
        pass: failures.is_empty(),
        detail: format!("{n} random values of each of 5 message types, failures {failures:?}"),
    }
}

fn main() {
    let checks: [(&str, fn() -> Verdict); 8] = [
        ("risk math matches oracles", risk_math),
        ("solver matches enumeration", solver),
        ("selected risk non-increasing in lambda", lambda_monotone),
        (
            "heavy tails: roc_full beats auction on deadlines",
            tail_risk,
        ),
        ("calibration loop", calibration_loop),
        ("roc_min converges to roc_full", min_convergence),
        ("determinism and replay", determinism),
        ("protocol round trips", protocol_round_trip),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        let v = check();
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} {}: {name}: {}",
            if v.pass { "PASS" } else { "FAIL" },
            i + 1,
            v.detail
        );
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

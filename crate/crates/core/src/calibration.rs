//! The feedback loop: an append-only ledger of reported predictions and
//! realised outcomes, per-(agent, option) calibration statistics, PIT-based
//! recalibration of reports, and the empirical outcome models used for
//! Min-tier agents.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{
    self, brier, crps, DiscreteOutcomeDistribution, DistributionError, PiecewiseQuantile,
    QuantilePoint, QuantileSummary, ReconstructionConfig, RiskReport, QUANTILE_LEVELS,
};
use crate::model::{AgentId, Context, OptionId, OutcomeVector, TaskId};
use crate::util::hashed_unit;

pub const PIT_BINS: usize = 10;
pub const EMA_DECAY: f64 = 0.9;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("outcome for task `{0}` attempt {1} already recorded")]
    Duplicate(TaskId, u32),
    #[error("malformed ledger line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

/// One realised execution and the prediction that preceded it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub task_id: TaskId,
    /// 0 for the primary attempt, 1 for the backup.
    pub attempt: u32,
    pub agent_id: AgentId,
    pub option_id: OptionId,
    pub context: Context,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<RiskReport>,
    pub realized: OutcomeVector,
    pub timestamp: f64,
}

impl LedgerRecord {
    pub fn key(&self) -> (AgentId, OptionId) {
        (self.agent_id.clone(), self.option_id.clone())
    }
}

/// Scores of one record against its report.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RecordScores {
    pub brier: Option<f64>,
    pub crps_time: Option<f64>,
    pub pit: Option<f64>,
}

/// Randomised probability integral transform of `y` under a step CDF:
/// `F(y-) + v (F(y) - F(y-))`, which is exactly uniform for a calibrated
/// discrete forecast. `v` is derived from the record identity so the ledger
/// statistics stay reproducible.
pub fn randomized_pit(marginal: &distributions::Marginal, y: f64, v: f64) -> f64 {
    let lo = marginal.cdf_left(y);
    let hi = marginal.cdf(y);
    lo + v * (hi - lo)
}

pub fn pit_bin(u: f64) -> usize {
    ((u * PIT_BINS as f64).floor() as usize).min(PIT_BINS - 1)
}

fn record_jitter(rec: &LedgerRecord) -> f64 {
    hashed_unit(&[
        rec.task_id.as_str().as_bytes(),
        &rec.attempt.to_le_bytes(),
        rec.agent_id.as_str().as_bytes(),
        rec.option_id.as_str().as_bytes(),
    ])
}

/// Scores a record. Completion-time scores are skipped when the realised
/// time is infinite (the option never completed).
pub fn score_record(
    rec: &LedgerRecord,
    recon: &ReconstructionConfig,
) -> Result<RecordScores, DistributionError> {
    let Some(report) = &rec.report else {
        return Ok(RecordScores::default());
    };
    let mut s = RecordScores {
        brier: report
            .success_prob()
            .map(|p| brier(p, rec.realized.success)),
        ..Default::default()
    };
    if rec.realized.completion_time.is_finite() {
        if let Some(dist) = report.to_distribution(recon)? {
            let m = dist.time_marginal();
            s.crps_time = Some(crps(&m, rec.realized.completion_time));
            s.pit = Some(randomized_pit(
                &m,
                rec.realized.completion_time,
                record_jitter(rec),
            ));
        }
    }
    Ok(s)
}

/// Running calibration statistics for one (agent, option).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KeyStats {
    pub count: u64,
    pub successes: u64,
    pub brier_count: u64,
    pub brier_sum: f64,
    pub crps_count: u64,
    pub crps_sum: f64,
    pub pit: [u64; PIT_BINS],
    pub ema_crps: Option<f64>,
}

impl KeyStats {
    fn absorb(&mut self, realized: &OutcomeVector, s: &RecordScores) {
        self.count += 1;
        if realized.success {
            self.successes += 1;
        }
        if let Some(b) = s.brier {
            self.brier_count += 1;
            self.brier_sum += b;
        }
        if let Some(c) = s.crps_time {
            self.crps_count += 1;
            self.crps_sum += c;
            self.ema_crps = Some(match self.ema_crps {
                Some(e) => EMA_DECAY * e + (1.0 - EMA_DECAY) * c,
                None => c,
            });
        }
        if let Some(u) = s.pit {
            self.pit[pit_bin(u)] += 1;
        }
    }

    pub fn mean_brier(&self) -> Option<f64> {
        (self.brier_count > 0).then(|| self.brier_sum / self.brier_count as f64)
    }

    pub fn mean_crps(&self) -> Option<f64> {
        (self.crps_count > 0).then(|| self.crps_sum / self.crps_count as f64)
    }

    pub fn pit_total(&self) -> u64 {
        self.pit.iter().sum()
    }

    pub fn success_rate(&self) -> Option<f64> {
        (self.count > 0).then(|| self.successes as f64 / self.count as f64)
    }

    /// Pearson chi-square of the PIT histogram against uniform.
    pub fn pit_chi_square(&self) -> f64 {
        chi_square_uniform(&self.pit)
    }
}

pub fn chi_square_uniform(counts: &[u64]) -> f64 {
    let n: u64 = counts.iter().sum();
    if n == 0 {
        return 0.0;
    }
    let e = n as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| {
            let d = c as f64 - e;
            d * d / e
        })
        .sum()
}

pub type StatsKey = (AgentId, OptionId);

/// Append-only log of outcomes with derived per-key statistics.
#[derive(Debug, Clone, Default)]
pub struct CalibrationLedger {
    records: Vec<LedgerRecord>,
    stats: BTreeMap<StatsKey, KeyStats>,
    seen: BTreeSet<(TaskId, u32)>,
    recon: ReconstructionConfig,
}

impl CalibrationLedger {
    pub fn new(recon: ReconstructionConfig) -> Self {
        Self {
            recon,
            ..Default::default()
        }
    }

    pub fn records(&self) -> &[LedgerRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn stats(&self) -> &BTreeMap<StatsKey, KeyStats> {
        &self.stats
    }

    pub fn key_stats(&self, agent: &AgentId, option: &OptionId) -> Option<&KeyStats> {
        self.stats.get(&(agent.clone(), option.clone()))
    }

    /// Appends a record and folds its scores into the key statistics.
    pub fn record_outcome(&mut self, rec: LedgerRecord) -> Result<RecordScores, LedgerError> {
        let id = (rec.task_id.clone(), rec.attempt);
        if self.seen.contains(&id) {
            return Err(LedgerError::Duplicate(id.0, id.1));
        }
        let scores = score_record(&rec, &self.recon)?;
        self.stats
            .entry(rec.key())
            .or_default()
            .absorb(&rec.realized, &scores);
        self.seen.insert(id);
        self.records.push(rec);
        Ok(scores)
    }

    /// Rebuilds the statistics from the raw records.
    pub fn recompute_stats(&self) -> Result<BTreeMap<StatsKey, KeyStats>, DistributionError> {
        let mut out: BTreeMap<StatsKey, KeyStats> = BTreeMap::new();
        for rec in &self.records {
            let s = score_record(rec, &self.recon)?;
            out.entry(rec.key()).or_default().absorb(&rec.realized, &s);
        }
        Ok(out)
    }

    pub fn mean_brier(&self) -> Option<f64> {
        let (n, s) = self
            .stats
            .values()
            .fold((0, 0.0), |(n, s), k| (n + k.brier_count, s + k.brier_sum));
        (n > 0).then(|| s / n as f64)
    }

    pub fn mean_crps(&self) -> Option<f64> {
        let (n, s) = self
            .stats
            .values()
            .fold((0, 0.0), |(n, s), k| (n + k.crps_count, s + k.crps_sum));
        (n > 0).then(|| s / n as f64)
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), LedgerError> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)
                .map_err(|e| LedgerError::Parse { line: 0, source: e })?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, recon: ReconstructionConfig) -> Result<Self, LedgerError> {
        let mut ledger = Self::new(recon);
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: LedgerRecord =
                serde_json::from_str(&line).map_err(|e| LedgerError::Parse {
                    line: i + 1,
                    source: e,
                })?;
            ledger.record_outcome(rec)?;
        }
        Ok(ledger)
    }
}

// ---------------------------------------------------------------------------
// Recalibration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecalibrationConfig {
    pub enabled: bool,
    /// Reports stay untouched until a key has this many records.
    pub k_min: u64,
}

impl Default for RecalibrationConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            k_min: 20,
        }
    }
}

/// Piecewise-linear empirical CDF of the PIT values, with knots at the bin
/// edges.
struct PitCdf {
    knots: [f64; PIT_BINS + 1],
}

impl PitCdf {
    fn new(hist: &[u64; PIT_BINS]) -> Option<Self> {
        let n: u64 = hist.iter().sum();
        if n == 0 {
            return None;
        }
        let mut knots = [0.0; PIT_BINS + 1];
        let mut acc = 0;
        for (i, c) in hist.iter().enumerate() {
            acc += c;
            knots[i + 1] = acc as f64 / n as f64;
        }
        knots[PIT_BINS] = 1.0;
        Some(Self { knots })
    }

    fn eval(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        let x = u * PIT_BINS as f64;
        let i = (x.floor() as usize).min(PIT_BINS - 1);
        let f = x - i as f64;
        self.knots[i] + f * (self.knots[i + 1] - self.knots[i])
    }

    fn inverse(&self, q: f64) -> f64 {
        let q = q.clamp(0.0, 1.0);
        for i in 0..PIT_BINS {
            let (lo, hi) = (self.knots[i], self.knots[i + 1]);
            if q <= hi && hi > lo {
                return (i as f64 + ((q - lo) / (hi - lo)).clamp(0.0, 1.0)) / PIT_BINS as f64;
            }
        }
        1.0
    }
}

fn blended_success(reported: f64, stats: &KeyStats, k_min: u64) -> f64 {
    let n = stats.count as f64;
    let freq = stats.successes as f64 / n;
    let w = n / (n + k_min as f64);
    w * freq + (1.0 - w) * reported
}

/// Quantile recalibration of a report using the key's PIT history, plus a
/// Beta-posterior blend of the reported success probability with the
/// observed success frequency. Reports for keys with fewer than `k_min`
/// records come back unchanged.
pub fn recalibrate(
    report: &RiskReport,
    stats: Option<&KeyStats>,
    cfg: &RecalibrationConfig,
    recon: &ReconstructionConfig,
) -> Result<RiskReport, DistributionError> {
    let Some(stats) = stats.filter(|s| s.count >= cfg.k_min && s.count > 0) else {
        return Ok(report.clone());
    };
    let pit = PitCdf::new(&stats.pit);
    match report {
        RiskReport::Min => Ok(RiskReport::Min),
        RiskReport::Full { atoms } => {
            let mut dist = atoms.clone();
            if let Some(g) = &pit {
                let m = dist.time_marginal();
                let mut before = 0.0;
                let mut mass = BTreeMap::new();
                for (t, p) in m.atoms() {
                    let after = (before + p).min(1.0);
                    mass.insert(t.to_bits(), g.eval(after) - g.eval(before));
                    before = after;
                }
                dist = dist.reweight_times(&mass)?;
            }
            let p = blended_success(dist.success_prob(), stats, cfg.k_min);
            Ok(RiskReport::Full {
                atoms: dist.with_success_prob(p),
            })
        }
        RiskReport::Lite { summary } => {
            let mut s = summary.clone();
            if let Some(g) = &pit {
                let q = PiecewiseQuantile::new(&summary.time_quantiles, Some(recon.min_time));
                s.time_quantiles = summary
                    .time_quantiles
                    .iter()
                    .map(|pt| QuantilePoint {
                        level: pt.level,
                        value: q.eval(g.inverse(pt.level).clamp(1e-9, 1.0 - 1e-9)),
                    })
                    .collect();
                // keep monotone after floating-point interpolation
                for i in 1..s.time_quantiles.len() {
                    if s.time_quantiles[i].value < s.time_quantiles[i - 1].value {
                        s.time_quantiles[i].value = s.time_quantiles[i - 1].value;
                    }
                }
            }
            s.success_prob = blended_success(summary.success_prob, stats, cfg.k_min);
            Ok(RiskReport::Lite { summary: s })
        }
    }
}

// ---------------------------------------------------------------------------
// Empirical outcome models
// ---------------------------------------------------------------------------

/// Axis-aligned quantisation of numeric context features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BucketConfig {
    pub bins: usize,
    /// Feature name -> (low, high) range split into `bins` equal cells.
    pub ranges: BTreeMap<String, (f64, f64)>,
}

impl Default for BucketConfig {
    fn default() -> Self {
        Self {
            bins: 4,
            ranges: BTreeMap::new(),
        }
    }
}

impl BucketConfig {
    /// Bucket label such as `distance_m=2;smoke=0`. Missing or non-numeric
    /// features map to `_`.
    pub fn bucket(&self, ctx: &Context) -> String {
        let mut parts = Vec::with_capacity(self.ranges.len());
        for (name, (lo, hi)) in &self.ranges {
            let cell = match ctx.num(name) {
                Some(x) if hi > lo => {
                    let f = ((x - lo) / (hi - lo) * self.bins as f64).floor();
                    (f.max(0.0) as usize)
                        .min(self.bins.saturating_sub(1))
                        .to_string()
                }
                _ => "_".to_string(),
            };
            parts.push(format!("{name}={cell}"));
        }
        parts.join(";")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub buckets: BucketConfig,
    /// Minimum samples before a level of the fallback chain is trusted.
    pub min_samples: usize,
    /// Used when no level has enough samples. The default is optimistic
    /// (fast, likely to succeed) so that untried options get explored
    /// instead of failing chance constraints forever.
    pub prior: QuantileSummary,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            buckets: BucketConfig::default(),
            min_samples: 5,
            prior: QuantileSummary {
                time_quantiles: QUANTILE_LEVELS
                    .iter()
                    .zip([20.0, 40.0, 80.0, 160.0, 320.0, 480.0])
                    .map(|(&level, value)| QuantilePoint { level, value })
                    .collect(),
                success_prob: 0.9,
                metric_quantiles: BTreeMap::new(),
                cost: 0.0,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub samples: usize,
    pub distribution: DiscreteOutcomeDistribution,
}

/// Which level of the fallback chain answered a lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelLevel {
    Bucket,
    AgentOption,
    Option,
    Prior,
}

/// Learned outcome laws per (agent, option, context bucket), with pooled
/// fallbacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalModel {
    pub config: ModelConfig,
    pub by_bucket: BTreeMap<AgentId, BTreeMap<OptionId, BTreeMap<String, ModelEntry>>>,
    pub by_agent_option: BTreeMap<AgentId, BTreeMap<OptionId, ModelEntry>>,
    pub by_option: BTreeMap<OptionId, ModelEntry>,
    pub prior: DiscreteOutcomeDistribution,
}

/// Empirical law of the observed outcomes with the success mass
/// Laplace-smoothed to `(s + 1) / (n + 2)`. When one class was never
/// observed, its smoothing mass sits on the observed `(T, metrics)` values.
pub fn empirical_law(outcomes: &[OutcomeVector]) -> Option<DiscreteOutcomeDistribution> {
    if outcomes.is_empty() {
        return None;
    }
    let n = outcomes.len() as f64;
    let s = outcomes.iter().filter(|o| o.success).count() as f64;
    let target_s = (s + 1.0) / (n + 2.0);
    let class = |success: bool, target: f64, observed: f64| -> Vec<(OutcomeVector, f64)> {
        if observed > 0.0 {
            outcomes
                .iter()
                .filter(|o| o.success == success)
                .map(|o| (o.clone(), target / observed))
                .collect()
        } else {
            outcomes
                .iter()
                .map(|o| {
                    let mut f = o.clone();
                    f.success = success;
                    (f, target / n)
                })
                .collect()
        }
    };
    let mut items = class(true, target_s, s);
    items.extend(class(false, 1.0 - target_s, n - s));
    DiscreteOutcomeDistribution::from_weighted(items).ok()
}

fn entry(outcomes: &[OutcomeVector]) -> Option<ModelEntry> {
    empirical_law(outcomes).map(|d| ModelEntry {
        samples: outcomes.len(),
        distribution: d,
    })
}

/// Learns outcome laws from every record in the ledger. The result does
/// not depend on record order.
pub fn fit_empirical_model(
    ledger: &CalibrationLedger,
    cfg: &ModelConfig,
    recon: &ReconstructionConfig,
) -> Result<EmpiricalModel, DistributionError> {
    let mut bucketed: BTreeMap<(AgentId, OptionId, String), Vec<OutcomeVector>> = BTreeMap::new();
    let mut pooled: BTreeMap<(AgentId, OptionId), Vec<OutcomeVector>> = BTreeMap::new();
    let mut per_option: BTreeMap<OptionId, Vec<OutcomeVector>> = BTreeMap::new();
    for r in ledger.records() {
        let b = cfg.buckets.bucket(&r.context);
        bucketed
            .entry((r.agent_id.clone(), r.option_id.clone(), b))
            .or_default()
            .push(r.realized.clone());
        pooled.entry(r.key()).or_default().push(r.realized.clone());
        per_option
            .entry(r.option_id.clone())
            .or_default()
            .push(r.realized.clone());
    }
    let mut model = EmpiricalModel {
        config: cfg.clone(),
        by_bucket: BTreeMap::new(),
        by_agent_option: BTreeMap::new(),
        by_option: BTreeMap::new(),
        prior: distributions::from_quantile_summary(&cfg.prior, recon)?,
    };
    for ((a, o, b), v) in bucketed {
        if let Some(e) = entry(&v) {
            model
                .by_bucket
                .entry(a)
                .or_default()
                .entry(o)
                .or_default()
                .insert(b, e);
        }
    }
    for ((a, o), v) in pooled {
        if let Some(e) = entry(&v) {
            model.by_agent_option.entry(a).or_default().insert(o, e);
        }
    }
    for (o, v) in per_option {
        if let Some(e) = entry(&v) {
            model.by_option.insert(o, e);
        }
    }
    Ok(model)
}

impl EmpiricalModel {
    /// Outcome law for `(agent, option)` in `context`, walking the chain
    /// bucket -> agent/option pooled -> option pooled -> prior.
    pub fn lookup(
        &self,
        agent: &AgentId,
        option: &OptionId,
        context: &Context,
    ) -> (&DiscreteOutcomeDistribution, ModelLevel) {
        let min = self.config.min_samples;
        let bucket = self.config.buckets.bucket(context);
        if let Some(e) = self
            .by_bucket
            .get(agent)
            .and_then(|m| m.get(option))
            .and_then(|m| m.get(&bucket))
            .filter(|e| e.samples >= min)
        {
            return (&e.distribution, ModelLevel::Bucket);
        }
        if let Some(e) = self
            .by_agent_option
            .get(agent)
            .and_then(|m| m.get(option))
            .filter(|e| e.samples >= min)
        {
            return (&e.distribution, ModelLevel::AgentOption);
        }
        if let Some(e) = self.by_option.get(option).filter(|e| e.samples >= min) {
            return (&e.distribution, ModelLevel::Option);
        }
        (&self.prior, ModelLevel::Prior)
    }
}

/// Orders keys by calibration quality: ascending EMA of CRPS, then mean
/// Brier, then the key itself. Keys without statistics rank last.
pub fn reputation_rank(keys: &[StatsKey], stats: &BTreeMap<StatsKey, KeyStats>) -> Vec<StatsKey> {
    let metric = |k: &StatsKey| {
        let s = stats.get(k);
        (
            s.and_then(|s| s.ema_crps).unwrap_or(f64::INFINITY),
            s.and_then(|s| s.mean_brier()).unwrap_or(f64::INFINITY),
        )
    };
    let mut v: Vec<StatsKey> = keys.to_vec();
    v.sort_by(|a, b| {
        let (ea, ba) = metric(a);
        let (eb, bb) = metric(b);
        ea.total_cmp(&eb).then(ba.total_cmp(&bb)).then(a.cmp(b))
    });
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{kolmogorov_distance, sample, Marginal};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn key(a: &str, o: &str) -> StatsKey {
        (a.into(), o.into())
    }

    fn rec(task: &str, report: Option<RiskReport>, realized: OutcomeVector) -> LedgerRecord {
        LedgerRecord {
            task_id: task.into(),
            attempt: 0,
            agent_id: "a".into(),
            option_id: "o".into(),
            context: Context::default(),
            report,
            realized,
            timestamp: 0.0,
        }
    }

    fn lite(p: f64) -> RiskReport {
        RiskReport::Lite {
            summary: QuantileSummary {
                time_quantiles: QUANTILE_LEVELS
                    .iter()
                    .zip([200.0, 250.0, 300.0, 339.0, 384.0, 420.0])
                    .map(|(&level, value)| QuantilePoint { level, value })
                    .collect(),
                success_prob: p,
                metric_quantiles: BTreeMap::new(),
                cost: 0.0,
            },
        }
    }

    #[test]
    fn brier_sample_for_successful_ninety_percent_report() {
        let mut l = CalibrationLedger::default();
        let s = l
            .record_outcome(rec("t1", Some(lite(0.9)), OutcomeVector::new(324.0, true)))
            .unwrap();
        assert!((s.brier.unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn point_mass_report_has_zero_crps() {
        let mut l = CalibrationLedger::default();
        let d = DiscreteOutcomeDistribution::point(OutcomeVector::new(50.0, true));
        let s = l
            .record_outcome(rec(
                "t1",
                Some(RiskReport::Full { atoms: d }),
                OutcomeVector::new(50.0, true),
            ))
            .unwrap();
        assert_eq!(s.crps_time, Some(0.0));
    }

    #[test]
    fn means_match_recomputation() {
        let mut l = CalibrationLedger::default();
        let mut samples = Vec::new();
        for (i, (t, ok)) in [(300.0, true), (400.0, false), (250.0, true)]
            .iter()
            .enumerate()
        {
            let s = l
                .record_outcome(rec(
                    &format!("t{i}"),
                    Some(lite(0.8)),
                    OutcomeVector::new(*t, *ok),
                ))
                .unwrap();
            samples.push(s);
        }
        let st = l.key_stats(&"a".into(), &"o".into()).unwrap();
        assert_eq!(st.count, 3);
        let want = samples.iter().map(|s| s.brier.unwrap()).sum::<f64>() / 3.0;
        assert!((st.mean_brier().unwrap() - want).abs() < 1e-15);
        let want = samples.iter().map(|s| s.crps_time.unwrap()).sum::<f64>() / 3.0;
        assert!((st.mean_crps().unwrap() - want).abs() < 1e-12);
        assert_eq!(&l.recompute_stats().unwrap(), l.stats());
    }

    #[test]
    fn duplicate_attempt_is_rejected() {
        let mut l = CalibrationLedger::default();
        l.record_outcome(rec("t1", None, OutcomeVector::new(1.0, true)))
            .unwrap();
        assert!(matches!(
            l.record_outcome(rec("t1", None, OutcomeVector::new(1.0, true))),
            Err(LedgerError::Duplicate(..))
        ));
    }

    #[test]
    fn infinite_realized_time_skips_time_scores() {
        let mut l = CalibrationLedger::default();
        let s = l
            .record_outcome(rec("t1", Some(lite(0.9)), OutcomeVector::never_completed()))
            .unwrap();
        assert!(s.brier.is_some());
        assert!(s.crps_time.is_none() && s.pit.is_none());
    }

    fn stats_with(count: u64, successes: u64, pit: [u64; PIT_BINS]) -> KeyStats {
        KeyStats {
            count,
            successes,
            pit,
            ..Default::default()
        }
    }

    #[test]
    fn recalibration_is_identity_below_k_min() {
        let r = lite(0.9);
        let cfg = RecalibrationConfig::default();
        let recon = ReconstructionConfig::default();
        let st = stats_with(19, 0, [0, 0, 0, 0, 0, 0, 0, 0, 0, 19]);
        assert_eq!(recalibrate(&r, Some(&st), &cfg, &recon).unwrap(), r);
        assert_eq!(recalibrate(&r, None, &cfg, &recon).unwrap(), r);
        assert_eq!(
            recalibrate(&r, Some(&KeyStats::default()), &cfg, &recon).unwrap(),
            r
        );
    }

    #[test]
    fn uniform_pit_history_leaves_report_unchanged() {
        let recon = ReconstructionConfig::default();
        let base = DiscreteOutcomeDistribution::from_weighted(
            (0..64).map(|j| (OutcomeVector::new(100.0 + j as f64, true), 1.0)),
        )
        .unwrap();
        let r = RiskReport::Full {
            atoms: base.clone(),
        };
        let st = stats_with(100, 100, [10; PIT_BINS]);
        let out = recalibrate(&r, Some(&st), &RecalibrationConfig::default(), &recon).unwrap();
        let RiskReport::Full { atoms } = out else {
            panic!()
        };
        let d = kolmogorov_distance(&atoms.time_marginal(), &base.time_marginal());
        assert!(d <= 1.0 / 64.0 + 1e-12, "{d}");
        assert!((atoms.success_prob() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn late_history_pushes_median_up() {
        let recon = ReconstructionConfig::default();
        let r = lite(0.9);
        // realised times always above the reported median
        let st = stats_with(40, 36, [0, 0, 0, 0, 0, 5, 5, 10, 10, 10]);
        let out = recalibrate(&r, Some(&st), &RecalibrationConfig::default(), &recon).unwrap();
        let (RiskReport::Lite { summary: before }, RiskReport::Lite { summary: after }) =
            (&r, &out)
        else {
            panic!()
        };
        assert!(after.time_quantiles[2].value > before.time_quantiles[2].value);

        let full = RiskReport::Full {
            atoms: distributions::from_quantile_summary(before, &recon).unwrap(),
        };
        let out = recalibrate(&full, Some(&st), &RecalibrationConfig::default(), &recon).unwrap();
        let RiskReport::Full { atoms } = out else {
            panic!()
        };
        let RiskReport::Full { atoms: orig } = full else {
            panic!()
        };
        assert!(atoms.time_marginal().quantile(0.5) > orig.time_marginal().quantile(0.5));
    }

    #[test]
    fn success_probability_blends_with_history() {
        let recon = ReconstructionConfig::default();
        let st = stats_with(20, 10, [2; PIT_BINS]);
        let out = recalibrate(
            &lite(0.9),
            Some(&st),
            &RecalibrationConfig::default(),
            &recon,
        )
        .unwrap();
        // weight 20/40 on the observed 0.5
        assert!((out.success_prob().unwrap() - 0.7).abs() < 1e-12);
    }

    #[test]
    fn empty_ledger_model_returns_prior() {
        let l = CalibrationLedger::default();
        let m = fit_empirical_model(
            &l,
            &ModelConfig::default(),
            &ReconstructionConfig::default(),
        )
        .unwrap();
        let (d, lvl) = m.lookup(&"a".into(), &"o".into(), &Context::default());
        assert_eq!(lvl, ModelLevel::Prior);
        assert_eq!(d, &m.prior);
    }

    #[test]
    fn thin_bucket_falls_back_to_pooled() {
        let mut cfg = ModelConfig::default();
        cfg.buckets.ranges.insert("distance_m".into(), (0.0, 100.0));
        let mut l = CalibrationLedger::default();
        for i in 0..10 {
            let mut r = rec(
                &format!("t{i}"),
                None,
                OutcomeVector::new(10.0 + i as f64, true),
            );
            let dist = if i < 4 { 10.0 } else { 90.0 };
            r.context = Context::default().with("distance_m", dist);
            l.record_outcome(r).unwrap();
        }
        let m = fit_empirical_model(&l, &cfg, &ReconstructionConfig::default()).unwrap();
        let near = Context::default().with("distance_m", 5.0);
        let far = Context::default().with("distance_m", 95.0);
        assert_eq!(
            m.lookup(&"a".into(), &"o".into(), &near).1,
            ModelLevel::AgentOption
        );
        assert_eq!(
            m.lookup(&"a".into(), &"o".into(), &far).1,
            ModelLevel::Bucket
        );
        assert_eq!(
            m.lookup(&"b".into(), &"o".into(), &far).1,
            ModelLevel::Option
        );
    }

    #[test]
    fn laplace_smoothing_of_success() {
        let outs: Vec<_> = (0..8)
            .map(|i| OutcomeVector::new(1.0 + i as f64, true))
            .collect();
        let d = empirical_law(&outs).unwrap();
        assert!((d.success_prob() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn model_of_known_law_converges() {
        let truth = DiscreteOutcomeDistribution::from_weighted([
            (OutcomeVector::new(100.0, true), 0.5),
            (OutcomeVector::new(200.0, true), 0.3),
            (OutcomeVector::new(400.0, false), 0.2),
        ])
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut l = CalibrationLedger::default();
        for i in 0..100 {
            l.record_outcome(rec(&format!("t{i}"), None, sample(&truth, &mut rng)))
                .unwrap();
        }
        let m = fit_empirical_model(
            &l,
            &ModelConfig::default(),
            &ReconstructionConfig::default(),
        )
        .unwrap();
        let (d, _) = m.lookup(&"a".into(), &"o".into(), &Context::default());
        let dist = kolmogorov_distance(&d.time_marginal(), &truth.time_marginal());
        assert!(dist <= 0.15, "{dist}");
    }

    #[test]
    fn reputation_orders_by_ema_then_brier() {
        let mut stats = BTreeMap::new();
        stats.insert(
            key("x", "o"),
            KeyStats {
                ema_crps: Some(0.4),
                ..Default::default()
            },
        );
        stats.insert(
            key("y", "o"),
            KeyStats {
                ema_crps: Some(0.1),
                ..Default::default()
            },
        );
        let r = reputation_rank(&[key("x", "o"), key("y", "o")], &stats);
        assert_eq!(r[0], key("y", "o"));

        let mut stats = BTreeMap::new();
        let mk = |b: f64| KeyStats {
            ema_crps: Some(0.2),
            brier_count: 1,
            brier_sum: b,
            ..Default::default()
        };
        stats.insert(key("x", "o"), mk(0.09));
        stats.insert(key("y", "o"), mk(0.02));
        let r = reputation_rank(&[key("x", "o"), key("y", "o")], &stats);
        assert_eq!(r[0], key("y", "o"));
    }

    #[test]
    fn randomized_pit_spans_atom_jump() {
        let m = Marginal::from_weighted([(1.0, 0.5), (2.0, 0.5)]);
        assert_eq!(randomized_pit(&m, 1.0, 0.0), 0.0);
        assert_eq!(randomized_pit(&m, 1.0, 1.0), 0.5);
        assert_eq!(randomized_pit(&m, 2.0, 0.5), 0.75);
    }

    #[test]
    fn ledger_jsonl_round_trip() {
        let mut l = CalibrationLedger::default();
        for i in 0..3 {
            l.record_outcome(rec(
                &format!("t{i}"),
                Some(lite(0.7)),
                OutcomeVector::new(300.0, i != 1),
            ))
            .unwrap();
        }
        let mut buf = Vec::new();
        l.write_jsonl(&mut buf).unwrap();
        let back =
            CalibrationLedger::read_jsonl(&buf[..], ReconstructionConfig::default()).unwrap();
        assert_eq!(back.records(), l.records());
        assert_eq!(back.stats(), l.stats());
    }
}

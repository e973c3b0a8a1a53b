//! Finite-support outcome distributions, quantile summaries and the scoring
//! rules used to grade them.
//!
//! A [`DiscreteOutcomeDistribution`] is the joint law of `(T, S, R)` that a
//! Full-tier agent reports, that the ledger learns for Min-tier agents, and
//! that the clearinghouse composes for primary/backup portfolios. Atoms are
//! kept in a canonical order (time, success, metrics) with duplicates merged,
//! so equal laws have equal representations.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{OutcomeVector, Tier};
use crate::util::maybe_inf;

/// Default cap on the number of atoms of any distribution.
pub const DEFAULT_SUPPORT_CAP: usize = 4096;

/// Quantile levels carried by a Lite summary.
pub const QUANTILE_LEVELS: [f64; 6] = [0.1, 0.25, 0.5, 0.75, 0.9, 0.95];

const NORMALIZE_TOL: f64 = 1e-12;
const VALID_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistributionError {
    #[error("distribution has no atoms with positive probability")]
    Empty,
    #[error("atom probability {0} is not a positive finite number")]
    InvalidProbability(f64),
    #[error("probabilities sum to {0}, expected 1")]
    NotNormalized(f64),
    #[error("completion time {0} is not > 0")]
    NonPositiveTime(f64),
    #[error("metric `{0}` has a non-finite value")]
    NonFiniteMetric(String),
    #[error(
        "{quantity} quantiles are not monotone: level {lower_level} -> {lower_value}, level {upper_level} -> {upper_value}"
    )]
    NonMonotoneQuantiles {
        quantity: String,
        lower_level: f64,
        lower_value: f64,
        upper_level: f64,
        upper_value: f64,
    },
    #[error("{quantity} quantile level {level} is outside (0,1) or not increasing")]
    InvalidLevel { quantity: String, level: f64 },
    #[error("{quantity} has no quantiles")]
    NoQuantiles { quantity: String },
    #[error("success probability {0} outside [0,1]")]
    InvalidSuccessProb(f64),
}

// ---------------------------------------------------------------------------
// Canonical ordering helpers
// ---------------------------------------------------------------------------

pub(crate) fn cmp_outcomes(a: &OutcomeVector, b: &OutcomeVector) -> Ordering {
    a.completion_time
        .total_cmp(&b.completion_time)
        .then(a.success.cmp(&b.success))
        .then_with(|| {
            let mut ia = a.metrics.iter();
            let mut ib = b.metrics.iter();
            loop {
                match (ia.next(), ib.next()) {
                    (None, None) => return Ordering::Equal,
                    (None, Some(_)) => return Ordering::Less,
                    (Some(_), None) => return Ordering::Greater,
                    (Some((ka, va)), Some((kb, vb))) => {
                        let o = ka.cmp(kb).then(va.total_cmp(vb));
                        if o != Ordering::Equal {
                            return o;
                        }
                    }
                }
            }
        })
}

// ---------------------------------------------------------------------------
// Discrete joint law
// ---------------------------------------------------------------------------

/// One support point of a joint outcome law.
#[derive(Debug, Clone, PartialEq)]
pub struct Atom {
    pub outcome: OutcomeVector,
    pub p: f64,
}

#[derive(Serialize, Deserialize)]
struct AtomRepr {
    #[serde(with = "maybe_inf")]
    t: f64,
    s: bool,
    #[serde(default)]
    metrics: BTreeMap<String, f64>,
    p: f64,
}

/// Finite-support joint law of the outcome vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AtomRepr>", into = "Vec<AtomRepr>")]
pub struct DiscreteOutcomeDistribution {
    atoms: Vec<Atom>,
}

impl TryFrom<Vec<AtomRepr>> for DiscreteOutcomeDistribution {
    type Error = DistributionError;

    fn try_from(v: Vec<AtomRepr>) -> Result<Self, Self::Error> {
        let total: f64 = v.iter().map(|a| a.p).sum();
        if (total - 1.0).abs() > VALID_SUM_TOL {
            return Err(DistributionError::NotNormalized(total));
        }
        for a in &v {
            if !(a.p > 0.0) || !a.p.is_finite() {
                return Err(DistributionError::InvalidProbability(a.p));
            }
        }
        Self::from_weighted(v.into_iter().map(|a| {
            (
                OutcomeVector {
                    completion_time: a.t,
                    success: a.s,
                    metrics: a.metrics,
                },
                a.p,
            )
        }))
    }
}

impl From<DiscreteOutcomeDistribution> for Vec<AtomRepr> {
    fn from(d: DiscreteOutcomeDistribution) -> Self {
        d.atoms
            .into_iter()
            .map(|a| AtomRepr {
                t: a.outcome.completion_time,
                s: a.outcome.success,
                metrics: a.outcome.metrics,
                p: a.p,
            })
            .collect()
    }
}

impl DiscreteOutcomeDistribution {
    /// Builds a law from non-negative weights. Zero weights are dropped,
    /// identical outcomes merged, and weights normalised to sum to one.
    pub fn from_weighted<I>(items: I) -> Result<Self, DistributionError>
    where
        I: IntoIterator<Item = (OutcomeVector, f64)>,
    {
        let mut atoms: Vec<Atom> = Vec::new();
        for (outcome, p) in items {
            if !p.is_finite() || p < 0.0 {
                return Err(DistributionError::InvalidProbability(p));
            }
            if p == 0.0 {
                continue;
            }
            if outcome.completion_time.is_nan() || !(outcome.completion_time > 0.0) {
                return Err(DistributionError::NonPositiveTime(outcome.completion_time));
            }
            if let Some((k, _)) = outcome.metrics.iter().find(|(_, v)| !v.is_finite()) {
                return Err(DistributionError::NonFiniteMetric(k.clone()));
            }
            atoms.push(Atom { outcome, p });
        }
        if atoms.is_empty() {
            return Err(DistributionError::Empty);
        }
        atoms.sort_by(|a, b| cmp_outcomes(&a.outcome, &b.outcome));
        let mut merged: Vec<Atom> = Vec::with_capacity(atoms.len());
        for a in atoms {
            match merged.last_mut() {
                Some(last) if cmp_outcomes(&last.outcome, &a.outcome) == Ordering::Equal => {
                    last.p += a.p;
                }
                _ => merged.push(a),
            }
        }
        let total: f64 = merged.iter().map(|a| a.p).sum();
        if (total - 1.0).abs() > NORMALIZE_TOL {
            for a in &mut merged {
                a.p /= total;
            }
        }
        Ok(Self { atoms: merged })
    }

    pub fn point(outcome: OutcomeVector) -> Self {
        Self {
            atoms: vec![Atom { outcome, p: 1.0 }],
        }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn len(&self) -> usize {
        self.atoms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn total_probability(&self) -> f64 {
        self.atoms.iter().map(|a| a.p).sum()
    }

    pub fn success_prob(&self) -> f64 {
        self.atoms
            .iter()
            .filter(|a| a.outcome.success)
            .map(|a| a.p)
            .sum()
    }

    pub fn expectation(&self, mut f: impl FnMut(&OutcomeVector) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.p * f(&a.outcome)).sum()
    }

    pub fn probability(&self, mut pred: impl FnMut(&OutcomeVector) -> bool) -> f64 {
        self.atoms
            .iter()
            .filter(|a| pred(&a.outcome))
            .map(|a| a.p)
            .sum()
    }

    pub fn time_marginal(&self) -> Marginal {
        Marginal::from_weighted(self.atoms.iter().map(|a| (a.outcome.completion_time, a.p)))
    }

    /// Marginal of one metric. Atoms that do not carry the metric count as 0.
    pub fn metric_marginal(&self, name: &str) -> Marginal {
        Marginal::from_weighted(
            self.atoms
                .iter()
                .map(|a| (a.outcome.metrics.get(name).copied().unwrap_or(0.0), a.p)),
        )
    }

    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .atoms
            .iter()
            .flat_map(|a| a.outcome.metrics.keys().cloned())
            .collect();
        names.sort();
        names.dedup();
        names
    }

    /// Keeps the `cap` most probable atoms and renormalises.
    pub fn truncate(&self, cap: usize) -> Self {
        if self.atoms.len() <= cap || cap == 0 {
            return self.clone();
        }
        let mut idx: Vec<usize> = (0..self.atoms.len()).collect();
        // stable: equal weights keep canonical order
        idx.sort_by(|&a, &b| self.atoms[b].p.total_cmp(&self.atoms[a].p));
        idx.truncate(cap);
        idx.sort_unstable();
        let kept: Vec<Atom> = idx.into_iter().map(|i| self.atoms[i].clone()).collect();
        let total: f64 = kept.iter().map(|a| a.p).sum();
        Self {
            atoms: kept
                .into_iter()
                .map(|a| Atom {
                    p: a.p / total,
                    outcome: a.outcome,
                })
                .collect(),
        }
    }

    /// Replaces the success probability while keeping the law of
    /// `(T, metrics)`; success becomes independent of the rest.
    pub fn with_success_prob(&self, p: f64) -> Self {
        let mut groups: Vec<(OutcomeVector, f64)> = Vec::new();
        for a in &self.atoms {
            let mut o = a.outcome.clone();
            o.success = false;
            groups.push((o, a.p));
        }
        let base = Self::from_weighted(groups).expect("non-empty law");
        let items = base.atoms.iter().flat_map(|a| {
            let mut s = a.outcome.clone();
            s.success = true;
            [(s, a.p * p), (a.outcome.clone(), a.p * (1.0 - p))]
        });
        Self::from_weighted(items).expect("non-empty law")
    }

    /// Applies `f` to each completion time, keeping probabilities.
    pub fn map_times(&self, mut f: impl FnMut(f64) -> f64) -> Self {
        Self::from_weighted(self.atoms.iter().map(|a| {
            let mut o = a.outcome.clone();
            o.completion_time = f(o.completion_time);
            (o, a.p)
        }))
        .expect("mapping keeps probabilities")
    }

    /// Rescales the mass of each distinct completion time so that the time
    /// marginal becomes `new_mass(t)`, keeping the conditional law of
    /// `(S, metrics)` given `T`.
    pub fn reweight_times(&self, new_mass: &BTreeMap<u64, f64>) -> Result<Self, DistributionError> {
        let old = self.time_marginal();
        let old_mass: BTreeMap<u64, f64> =
            old.atoms().iter().map(|(v, p)| (v.to_bits(), *p)).collect();
        Self::from_weighted(self.atoms.iter().map(|a| {
            let key = a.outcome.completion_time.to_bits();
            let scale = new_mass.get(&key).copied().unwrap_or(0.0) / old_mass[&key];
            (a.outcome.clone(), a.p * scale)
        }))
    }
}

/// Draws one outcome. Atom `i` is returned with probability `p_i`.
pub fn sample<R: Rng + ?Sized>(dist: &DiscreteOutcomeDistribution, rng: &mut R) -> OutcomeVector {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for a in &dist.atoms {
        acc += a.p;
        if u < acc {
            return a.outcome.clone();
        }
    }
    dist.atoms.last().expect("non-empty law").outcome.clone()
}

// ---------------------------------------------------------------------------
// One-dimensional marginals
// ---------------------------------------------------------------------------

/// Finite-support law of a scalar, atoms sorted ascending and merged.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal {
    atoms: Vec<(f64, f64)>,
}

impl Marginal {
    pub fn from_weighted<I: IntoIterator<Item = (f64, f64)>>(items: I) -> Self {
        let mut v: Vec<(f64, f64)> = items.into_iter().filter(|(_, p)| *p > 0.0).collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut out: Vec<(f64, f64)> = Vec::with_capacity(v.len());
        for (x, p) in v {
            match out.last_mut() {
                Some(last) if last.0 == x => last.1 += p,
                _ => out.push((x, p)),
            }
        }
        let total: f64 = out.iter().map(|a| a.1).sum();
        if total > 0.0 && (total - 1.0).abs() > NORMALIZE_TOL {
            for a in &mut out {
                a.1 /= total;
            }
        }
        Self { atoms: out }
    }

    pub fn point(x: f64) -> Self {
        Self {
            atoms: vec![(x, 1.0)],
        }
    }

    pub fn atoms(&self) -> &[(f64, f64)] {
        &self.atoms
    }

    /// `P[X <= x]`.
    pub fn cdf(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .take_while(|(v, _)| *v <= x)
            .map(|(_, p)| *p)
            .sum::<f64>()
            .min(1.0)
    }

    /// `P[X < x]`.
    pub fn cdf_left(&self, x: f64) -> f64 {
        self.atoms
            .iter()
            .take_while(|(v, _)| *v < x)
            .map(|(_, p)| *p)
            .sum::<f64>()
            .min(1.0)
    }

    /// Smallest support point `x` with `P[X <= x] >= level`.
    pub fn quantile(&self, level: f64) -> f64 {
        let mut acc = 0.0;
        for (x, p) in &self.atoms {
            acc += p;
            if acc >= level - 1e-12 {
                return *x;
            }
        }
        self.atoms.last().map(|a| a.0).unwrap_or(f64::NAN)
    }

    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(x, p)| x * p).sum()
    }

    pub fn is_point_mass(&self) -> bool {
        self.atoms.len() == 1
    }
}

// ---------------------------------------------------------------------------
// Quantile summaries (Lite tier)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantilePoint {
    pub level: f64,
    pub value: f64,
}

/// A few quantiles of completion time and each metric, plus a success
/// probability and a cost estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileSummary {
    pub time_quantiles: Vec<QuantilePoint>,
    pub success_prob: f64,
    #[serde(default)]
    pub metric_quantiles: BTreeMap<String, Vec<QuantilePoint>>,
    #[serde(default)]
    pub cost: f64,
}

fn validate_quantiles(
    quantity: &str,
    points: &[QuantilePoint],
    positive: bool,
) -> Result<(), DistributionError> {
    if points.is_empty() {
        return Err(DistributionError::NoQuantiles {
            quantity: quantity.to_string(),
        });
    }
    let mut prev_level = 0.0;
    for q in points {
        if !(q.level > prev_level && q.level < 1.0) {
            return Err(DistributionError::InvalidLevel {
                quantity: quantity.to_string(),
                level: q.level,
            });
        }
        prev_level = q.level;
        if !q.value.is_finite() {
            return Err(DistributionError::NonFiniteMetric(quantity.to_string()));
        }
        if positive && !(q.value > 0.0) {
            return Err(DistributionError::NonPositiveTime(q.value));
        }
    }
    for w in points.windows(2) {
        if w[1].value < w[0].value {
            return Err(DistributionError::NonMonotoneQuantiles {
                quantity: quantity.to_string(),
                lower_level: w[0].level,
                lower_value: w[0].value,
                upper_level: w[1].level,
                upper_value: w[1].value,
            });
        }
    }
    Ok(())
}

impl QuantileSummary {
    pub fn validate(&self) -> Result<(), DistributionError> {
        if !(0.0..=1.0).contains(&self.success_prob) {
            return Err(DistributionError::InvalidSuccessProb(self.success_prob));
        }
        validate_quantiles("time", &self.time_quantiles, true)?;
        for (name, q) in &self.metric_quantiles {
            validate_quantiles(name, q, false)?;
        }
        Ok(())
    }

    /// Extracts a summary from a joint law at the given levels.
    pub fn from_distribution(
        dist: &DiscreteOutcomeDistribution,
        levels: &[f64],
        cost: f64,
    ) -> Self {
        let extract = |m: &Marginal| {
            levels
                .iter()
                .map(|&level| QuantilePoint {
                    level,
                    value: m.quantile(level),
                })
                .collect::<Vec<_>>()
        };
        let metric_quantiles = dist
            .metric_names()
            .into_iter()
            .map(|k| {
                let m = dist.metric_marginal(&k);
                (k, extract(&m))
            })
            .collect();
        Self {
            time_quantiles: extract(&dist.time_marginal()),
            success_prob: dist.success_prob(),
            metric_quantiles,
            cost,
        }
    }
}

/// Grid sizes and bounds used to turn a summary back into a joint law.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconstructionConfig {
    /// Equal-mass atoms for the completion-time marginal.
    pub time_grid: usize,
    /// Equal-mass atoms per metric marginal; must divide `time_grid`.
    pub metric_grid: usize,
    /// Lower truncation point for the reconstructed time tail.
    pub min_time: f64,
    pub support_cap: usize,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            time_grid: 64,
            metric_grid: 8,
            min_time: 1.0,
            support_cap: DEFAULT_SUPPORT_CAP,
        }
    }
}

/// Continuous quantile function interpolating a summary: linear between
/// consecutive points, exponential tails whose rate matches the density of
/// the adjacent interior segment, lower tail clamped at `floor`.
pub struct PiecewiseQuantile<'a> {
    points: &'a [QuantilePoint],
    floor: Option<f64>,
}

impl<'a> PiecewiseQuantile<'a> {
    pub fn new(points: &'a [QuantilePoint], floor: Option<f64>) -> Self {
        Self { points, floor }
    }

    pub fn eval(&self, u: f64) -> f64 {
        let pts = self.points;
        let n = pts.len();
        let first = pts[0];
        let last = pts[n - 1];
        let x = if u <= first.level {
            if n < 2 || pts[1].value == first.value {
                first.value
            } else {
                let gap = pts[1].value - first.value;
                let scale = gap * first.level / (pts[1].level - first.level);
                first.value + scale * (u / first.level).ln()
            }
        } else if u >= last.level {
            if n < 2 || last.value == pts[n - 2].value {
                last.value
            } else {
                let gap = last.value - pts[n - 2].value;
                let tail = 1.0 - last.level;
                let scale = gap * tail / (last.level - pts[n - 2].level);
                last.value + scale * (tail / (1.0 - u)).ln()
            }
        } else {
            let i = pts.partition_point(|q| q.level <= u);
            let (lo, hi) = (pts[i - 1], pts[i]);
            lo.value + (hi.value - lo.value) * (u - lo.level) / (hi.level - lo.level)
        };
        match self.floor {
            Some(f) => x.max(f.min(first.value)),
            None => x,
        }
    }

    /// Equal-mass discretisation: `grid` atoms at the bin midpoints.
    pub fn discretize(&self, grid: usize) -> Vec<f64> {
        (0..grid)
            .map(|j| self.eval((j as f64 + 0.5) / grid as f64))
            .collect()
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Index of the metric atom paired with time atom `j`.
///
/// Time atoms and metric atoms are coupled by a fixed scrambling
/// permutation of the time grid, so each metric atom receives exactly
/// `grid / metric_grid` time atoms. The marginals are exact and the coupling
/// carries no systematic monotone dependence, while the joint support stays
/// at `grid` points instead of `grid * metric_grid`.
pub fn paired_metric_index(j: usize, grid: usize, metric_grid: usize, rank: usize) -> usize {
    let mut a = ((grid as f64) * 0.618).round() as usize + 2 * rank;
    a = a.max(1);
    while gcd(a, grid) != 1 {
        a += 1;
    }
    let perm = (a * j + 7 * rank + 3) % grid;
    perm * metric_grid / grid
}

/// Builds the joint law from per-marginal equal-mass atoms: time atoms are
/// paired with metric atoms via [`paired_metric_index`], success is an
/// independent Bernoulli.
pub fn joint_from_marginals(
    time_atoms: &[f64],
    success_prob: f64,
    metric_atoms: &BTreeMap<String, Vec<f64>>,
) -> Result<DiscreteOutcomeDistribution, DistributionError> {
    let grid = time_atoms.len();
    let w = 1.0 / grid as f64;
    let mut items = Vec::with_capacity(grid * 2);
    for (j, &t) in time_atoms.iter().enumerate() {
        let metrics: BTreeMap<String, f64> = metric_atoms
            .iter()
            .enumerate()
            .map(|(rank, (name, atoms))| {
                let i = paired_metric_index(j, grid, atoms.len(), rank);
                (name.clone(), atoms[i])
            })
            .collect();
        let base = OutcomeVector {
            completion_time: t,
            success: true,
            metrics,
        };
        let mut fail = base.clone();
        fail.success = false;
        items.push((base, w * success_prob));
        items.push((fail, w * (1.0 - success_prob)));
    }
    DiscreteOutcomeDistribution::from_weighted(items)
}

/// Reconstructs a joint law from a quantile summary.
///
/// Time is piecewise uniform between consecutive quantiles with exponential
/// tails (upper tail rate matched to the last inter-quantile gap, lower tail
/// clamped at `cfg.min_time`), discretised into `cfg.time_grid` equal-mass
/// atoms. Success is Bernoulli(`success_prob`) independent of time; metrics
/// are reconstructed the same way on `cfg.metric_grid` atoms.
pub fn from_quantile_summary(
    summary: &QuantileSummary,
    cfg: &ReconstructionConfig,
) -> Result<DiscreteOutcomeDistribution, DistributionError> {
    summary.validate()?;
    let times = PiecewiseQuantile::new(&summary.time_quantiles, Some(cfg.min_time))
        .discretize(cfg.time_grid);
    let metrics: BTreeMap<String, Vec<f64>> = summary
        .metric_quantiles
        .iter()
        .map(|(k, q)| {
            (
                k.clone(),
                PiecewiseQuantile::new(q, None).discretize(cfg.metric_grid),
            )
        })
        .collect();
    Ok(joint_from_marginals(&times, summary.success_prob, &metrics)?.truncate(cfg.support_cap))
}

// ---------------------------------------------------------------------------
// Portfolio composition
// ---------------------------------------------------------------------------

fn max_metrics(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> BTreeMap<String, f64> {
    let mut out = a.clone();
    for (k, v) in b {
        out.entry(k.clone())
            .and_modify(|x| *x = x.max(*v))
            .or_insert(*v);
    }
    out
}

/// Law of a primary/backup composition.
///
/// A primary atom that succeeds by `trigger_time` is kept as is. Otherwise
/// the backup starts at `trigger_time`: the composed outcome takes success
/// from the backup, completes at `trigger_time + T_backup`, and carries the
/// element-wise max of both attempts' metrics. Primary and backup are
/// independent. The result is capped at `support_cap` atoms.
pub fn compose_portfolio(
    primary: &DiscreteOutcomeDistribution,
    backup: Option<&DiscreteOutcomeDistribution>,
    trigger_time: f64,
    support_cap: usize,
) -> DiscreteOutcomeDistribution {
    let Some(backup) = backup else {
        return primary.clone();
    };
    let mut items: Vec<(OutcomeVector, f64)> = Vec::new();
    // primary atoms that hand over to the backup only matter through their
    // metrics, so group them first
    let mut handover: Vec<(BTreeMap<String, f64>, f64)> = Vec::new();
    for a in primary.atoms() {
        if a.outcome.success && a.outcome.completion_time <= trigger_time {
            items.push((a.outcome.clone(), a.p));
        } else {
            match handover.iter_mut().find(|(m, _)| *m == a.outcome.metrics) {
                Some((_, p)) => *p += a.p,
                None => handover.push((a.outcome.metrics.clone(), a.p)),
            }
        }
    }
    for (metrics, pa) in &handover {
        for b in backup.atoms() {
            items.push((
                OutcomeVector {
                    completion_time: trigger_time + b.outcome.completion_time,
                    success: b.outcome.success,
                    metrics: max_metrics(metrics, &b.outcome.metrics),
                },
                pa * b.p,
            ));
        }
    }
    DiscreteOutcomeDistribution::from_weighted(items)
        .expect("composition of valid laws is valid")
        .truncate(support_cap)
}

// ---------------------------------------------------------------------------
// Scoring rules and distances
// ---------------------------------------------------------------------------

/// Continuous ranked probability score of a finite-support forecast:
/// `E|X - y| - E|X - X'| / 2`.
pub fn crps(dist: &Marginal, realized: f64) -> f64 {
    let atoms = dist.atoms();
    if atoms.iter().any(|(x, _)| x.is_infinite()) || realized.is_infinite() {
        if atoms.len() == 1 && atoms[0].0 == realized {
            return 0.0;
        }
        return f64::INFINITY;
    }
    let abs_err: f64 = atoms.iter().map(|(x, p)| p * (x - realized).abs()).sum();
    // E|X - X'| = 2 * sum_i p_i x_i (P[X < x_i] - P[X > x_i]) for sorted atoms
    let mut below = 0.0;
    let mut spread = 0.0;
    for (x, p) in atoms {
        let above = (1.0 - below - p).max(0.0);
        spread += p * x * (below - above);
        below += p;
    }
    (abs_err - spread).max(0.0)
}

/// Squared error of an event probability.
pub fn brier(p: f64, outcome: bool) -> f64 {
    let o = if outcome { 1.0 } else { 0.0 };
    (p - o) * (p - o)
}

/// Sup-norm distance between two step CDFs, exact over the union of
/// supports.
pub fn kolmogorov_distance(a: &Marginal, b: &Marginal) -> f64 {
    let (xa, xb) = (a.atoms(), b.atoms());
    let (mut i, mut j) = (0, 0);
    let (mut fa, mut fb) = (0.0f64, 0.0f64);
    let mut d = 0.0f64;
    while i < xa.len() || j < xb.len() {
        let next = match (xa.get(i), xb.get(j)) {
            (Some(p), Some(q)) => p.0.min(q.0),
            (Some(p), None) => p.0,
            (None, Some(q)) => q.0,
            (None, None) => unreachable!(),
        };
        while i < xa.len() && xa[i].0 == next {
            fa += xa[i].1;
            i += 1;
        }
        while j < xb.len() && xb[j].0 == next {
            fb += xb[j].1;
            j += 1;
        }
        d = d.max((fa - fb).abs());
    }
    d.min(1.0)
}

// ---------------------------------------------------------------------------
// Risk reports
// ---------------------------------------------------------------------------

/// What an agent tells the clearinghouse about one eligible option.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tier", rename_all = "lowercase")]
pub enum RiskReport {
    Full { atoms: DiscreteOutcomeDistribution },
    Lite { summary: QuantileSummary },
    Min,
}

impl RiskReport {
    pub fn tier(&self) -> Tier {
        match self {
            RiskReport::Full { .. } => Tier::Full,
            RiskReport::Lite { .. } => Tier::Lite,
            RiskReport::Min => Tier::Min,
        }
    }

    pub fn has_payload(&self) -> bool {
        !matches!(self, RiskReport::Min)
    }

    /// The joint law the report describes; `None` for Min reports.
    pub fn to_distribution(
        &self,
        cfg: &ReconstructionConfig,
    ) -> Result<Option<DiscreteOutcomeDistribution>, DistributionError> {
        match self {
            RiskReport::Full { atoms } => Ok(Some(atoms.clone())),
            RiskReport::Lite { summary } => from_quantile_summary(summary, cfg).map(Some),
            RiskReport::Min => Ok(None),
        }
    }

    pub fn success_prob(&self) -> Option<f64> {
        match self {
            RiskReport::Full { atoms } => Some(atoms.success_prob()),
            RiskReport::Lite { summary } => Some(summary.success_prob),
            RiskReport::Min => None,
        }
    }
}

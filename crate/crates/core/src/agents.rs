//! Simulated agents: parametric ground-truth outcome generators and
//! tier-specific reporting with configurable miscalibration.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::clearinghouse::ReportProvider;
use crate::distributions::{
    self, joint_from_marginals, DiscreteOutcomeDistribution, DistributionError, QuantileSummary,
    RiskReport, QUANTILE_LEVELS,
};
use crate::model::{
    AgentDescriptor, AgentId, Context, OptionId, OptionSpec, OutcomeVector, Task, Tier,
};
use crate::util::hashed_unit;

pub const TIME_ATOMS: usize = 64;
pub const METRIC_ATOMS: usize = 8;
/// Smallest completion time a generator may produce, in seconds.
pub const MIN_TIME: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("agent `{agent}` has no ground truth for option `{option}`")]
    UnknownOption { agent: String, option: String },
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

/// `base + sum(coefficient * feature)` over numeric context features;
/// missing features contribute zero.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Linear {
    pub base: f64,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub coefficients: BTreeMap<String, f64>,
}

impl Linear {
    pub fn constant(base: f64) -> Self {
        Self {
            base,
            coefficients: BTreeMap::new(),
        }
    }

    pub fn with(mut self, feature: &str, coefficient: f64) -> Self {
        self.coefficients.insert(feature.to_string(), coefficient);
        self
    }

    pub fn eval(&self, ctx: &Context) -> f64 {
        self.base
            + self
                .coefficients
                .iter()
                .map(|(k, c)| c * ctx.num(k).unwrap_or(0.0))
                .sum::<f64>()
    }
}

/// Parametric law of a non-negative scalar given the context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum ScalarLaw {
    LogNormal { median: Linear, sigma: f64 },
    ShiftedExponential { shift: Linear, mean: Linear },
    Constant { value: Linear },
}

fn std_normal() -> Normal {
    Normal::standard()
}

fn probit(u: f64) -> f64 {
    if u <= 0.0 {
        f64::NEG_INFINITY
    } else if u >= 1.0 {
        f64::INFINITY
    } else {
        std_normal().inverse_cdf(u)
    }
}

fn phi(z: f64) -> f64 {
    if z == f64::NEG_INFINITY {
        0.0
    } else if z == f64::INFINITY {
        1.0
    } else {
        std_normal().cdf(z)
    }
}

/// Antiderivative of `-ln(1 - u)`, the unit exponential quantile function.
fn exp_quantile_integral(u: f64) -> f64 {
    if u >= 1.0 {
        0.0
    } else {
        let r = 1.0 - u;
        r * r.ln() - r
    }
}

impl ScalarLaw {
    /// CDF at `x` for the given context.
    pub fn cdf(&self, ctx: &Context, x: f64) -> f64 {
        match self {
            ScalarLaw::LogNormal { median, sigma } => {
                let m = median.eval(ctx).max(MIN_TIME);
                if *sigma <= 0.0 {
                    return if x >= m { 1.0 } else { 0.0 };
                }
                if x <= 0.0 {
                    return 0.0;
                }
                phi((x.ln() - m.ln()) / sigma)
            }
            ScalarLaw::ShiftedExponential { shift, mean } => {
                let s = shift.eval(ctx).max(0.0);
                let m = mean.eval(ctx).max(0.0);
                if x < s {
                    0.0
                } else if m == 0.0 {
                    1.0
                } else {
                    1.0 - (-(x - s) / m).exp()
                }
            }
            ScalarLaw::Constant { value } => {
                if x >= value.eval(ctx) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Analytic mean (untruncated).
    pub fn mean(&self, ctx: &Context) -> f64 {
        match self {
            ScalarLaw::LogNormal { median, sigma } => {
                median.eval(ctx).max(MIN_TIME) * (sigma.max(0.0).powi(2) / 2.0).exp()
            }
            ScalarLaw::ShiftedExponential { shift, mean } => {
                shift.eval(ctx).max(0.0) + mean.eval(ctx).max(0.0)
            }
            ScalarLaw::Constant { value } => value.eval(ctx),
        }
    }

    /// `n` equal-mass atoms, each the conditional mean of its quantile band,
    /// after truncating the law at `max` (the bands cover `[0, F(max)]`).
    /// Conditional means keep the discretised mean equal to the truncated
    /// mean and every atom at or below `max`.
    pub fn discretize(&self, ctx: &Context, n: usize, max: f64) -> Vec<f64> {
        let top = if max.is_finite() {
            self.cdf(ctx, max)
        } else {
            1.0
        };
        if top <= 0.0 {
            // the whole law lies above the truncation point
            return vec![max; n];
        }
        let band = |j: usize| (top * j as f64 / n as f64, top * (j + 1) as f64 / n as f64);
        let atoms: Vec<f64> = match self {
            ScalarLaw::LogNormal { median, sigma } => {
                let m = median.eval(ctx).max(MIN_TIME);
                if *sigma <= 0.0 {
                    vec![m; n]
                } else {
                    let s = *sigma;
                    let scale = m * (s * s / 2.0).exp();
                    (0..n)
                        .map(|j| {
                            let (a, b) = band(j);
                            let mass = phi(probit(b) - s) - phi(probit(a) - s);
                            if mass > 0.0 {
                                scale * mass / (b - a)
                            } else {
                                // far tail where the difference underflows
                                m * (s * probit((a + b) / 2.0)).exp()
                            }
                        })
                        .collect()
                }
            }
            ScalarLaw::ShiftedExponential { shift, mean } => {
                let s = shift.eval(ctx).max(0.0);
                let m = mean.eval(ctx).max(0.0);
                (0..n)
                    .map(|j| {
                        let (a, b) = band(j);
                        s + m * (exp_quantile_integral(b) - exp_quantile_integral(a)) / (b - a)
                    })
                    .collect()
            }
            ScalarLaw::Constant { value } => vec![value.eval(ctx); n],
        };
        atoms.into_iter().map(|x| x.min(max)).collect()
    }
}

fn default_t_max() -> f64 {
    f64::INFINITY
}

fn is_infinite(x: &f64) -> bool {
    x.is_infinite()
}

/// Ground truth of one option: completion time, success and metric laws.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptionTruth {
    pub time: ScalarLaw,
    /// Time laws are truncated here.
    #[serde(
        default = "default_t_max",
        with = "crate::util::maybe_inf",
        skip_serializing_if = "is_infinite"
    )]
    pub t_max: f64,
    /// Success probability, clamped to `[0, 1]`.
    pub success: Linear,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metrics: BTreeMap<String, ScalarLaw>,
}

impl OptionTruth {
    pub fn success_prob(&self, ctx: &Context) -> f64 {
        self.success.eval(ctx).clamp(0.0, 1.0)
    }

    /// The discretised joint law: 64 time atoms, 8 atoms per metric,
    /// success independent of time. Deterministic in the context.
    pub fn law(&self, ctx: &Context) -> Result<DiscreteOutcomeDistribution, DistributionError> {
        let times: Vec<f64> = self
            .time
            .discretize(ctx, TIME_ATOMS, self.t_max)
            .into_iter()
            .map(|t| t.max(MIN_TIME))
            .collect();
        let metrics: BTreeMap<String, Vec<f64>> = self
            .metrics
            .iter()
            .map(|(k, law)| (k.clone(), law.discretize(ctx, METRIC_ATOMS, f64::INFINITY)))
            .collect();
        joint_from_marginals(&times, self.success_prob(ctx), &metrics)
    }
}

/// How an agent distorts its ground truth when reporting.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "profile", rename_all = "snake_case")]
pub enum ReportingProfile {
    #[default]
    Truthful,
    /// Time spread shrunk by `gamma < 1` around the median, success
    /// probability inflated by `delta`.
    Overconfident { gamma: f64, delta: f64 },
    /// Time spread widened by `gamma > 1`, success probability deflated by
    /// `delta`.
    Underconfident { gamma: f64, delta: f64 },
    /// Each time atom scaled by an independent factor in
    /// `[1 - jitter, 1 + jitter]`.
    Noisy { jitter: f64 },
}

impl ReportingProfile {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        match self {
            ReportingProfile::Truthful => {}
            ReportingProfile::Overconfident { gamma, delta }
            | ReportingProfile::Underconfident { gamma, delta } => {
                if !(*gamma > 0.0 && gamma.is_finite()) {
                    v.push(format!("reporting gamma {gamma} must be > 0"));
                }
                if !(*delta >= 0.0 && *delta <= 1.0) {
                    v.push(format!("reporting delta {delta} outside [0,1]"));
                }
            }
            ReportingProfile::Noisy { jitter } => {
                if !(*jitter >= 0.0 && *jitter < 1.0) {
                    v.push(format!("reporting jitter {jitter} outside [0,1)"));
                }
            }
        }
        v
    }
}

/// A simulated agent: what it advertises, how it really behaves, and how it
/// reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentProfile {
    pub descriptor: AgentDescriptor,
    pub ground_truth: BTreeMap<OptionId, OptionTruth>,
    #[serde(default)]
    pub reporting: ReportingProfile,
    /// Breakdown probability per simulated hour.
    #[serde(default)]
    pub failure_rate: f64,
}

impl AgentProfile {
    pub fn validate(&self) -> Vec<String> {
        let id = &self.descriptor.agent_id;
        let mut v: Vec<String> = self
            .reporting
            .validate()
            .into_iter()
            .map(|m| format!("agent `{id}`: {m}"))
            .collect();
        if !(self.failure_rate >= 0.0 && self.failure_rate <= 1.0) {
            v.push(format!("agent `{id}`: failure rate outside [0,1]"));
        }
        for o in &self.descriptor.options {
            if !self.ground_truth.contains_key(&o.option_id) {
                v.push(format!(
                    "agent `{id}`: option `{}` has no ground truth",
                    o.option_id
                ));
            }
        }
        for (o, t) in &self.ground_truth {
            if let ScalarLaw::LogNormal { sigma, .. } = &t.time {
                if !(*sigma >= 0.0) {
                    v.push(format!("agent `{id}`: option `{o}` sigma must be >= 0"));
                }
            }
            if !(t.t_max > 0.0) {
                v.push(format!("agent `{id}`: option `{o}` t_max must be > 0"));
            }
        }
        v
    }

    fn truth(&self, option: &OptionId) -> Result<&OptionTruth, AgentError> {
        self.ground_truth
            .get(option)
            .ok_or_else(|| AgentError::UnknownOption {
                agent: self.descriptor.agent_id.to_string(),
                option: option.to_string(),
            })
    }

    pub fn generate_ground_truth(
        &self,
        option: &OptionId,
        ctx: &Context,
    ) -> Result<DiscreteOutcomeDistribution, AgentError> {
        Ok(self.truth(option)?.law(ctx)?)
    }

    /// The report this agent sends at its tier.
    pub fn report(&self, option: &OptionId, ctx: &Context) -> Result<RiskReport, AgentError> {
        let cost = self
            .descriptor
            .option(option)
            .map(|o| o.nominal_cost)
            .unwrap_or(0.0);
        self.report_at(self.descriptor.tier, option, ctx, cost)
    }

    pub fn report_at(
        &self,
        tier: Tier,
        option: &OptionId,
        ctx: &Context,
        cost: f64,
    ) -> Result<RiskReport, AgentError> {
        if tier == Tier::Min {
            return Ok(RiskReport::Min);
        }
        let truth = self.generate_ground_truth(option, ctx)?;
        let law = distort(&truth, &self.reporting, &self.jitter_key(option))?;
        Ok(match tier {
            Tier::Full => RiskReport::Full { atoms: law },
            _ => RiskReport::Lite {
                summary: QuantileSummary::from_distribution(&law, &QUANTILE_LEVELS, cost),
            },
        })
    }

    fn jitter_key(&self, option: &OptionId) -> String {
        format!("{}/{}", self.descriptor.agent_id, option)
    }

    /// One execution: a draw from the ground-truth law.
    pub fn execute<R: Rng + ?Sized>(
        &self,
        option: &OptionId,
        ctx: &Context,
        rng: &mut R,
    ) -> Result<OutcomeVector, AgentError> {
        Ok(distributions::sample(
            &self.generate_ground_truth(option, ctx)?,
            rng,
        ))
    }
}

impl ReportProvider for BTreeMap<AgentId, AgentProfile> {
    fn report(
        &self,
        agent: &AgentDescriptor,
        option: &OptionSpec,
        task: &Task,
        tier: Tier,
    ) -> Option<RiskReport> {
        self.get(&agent.agent_id)?
            .report_at(tier, &option.option_id, &task.context, option.nominal_cost)
            .ok()
    }
}

/// Applies a reporting profile to a ground-truth law. Truthful reports are
/// returned unchanged; distorted ones have their success probability
/// clamped to `[0.01, 0.99]`.
pub fn distort(
    truth: &DiscreteOutcomeDistribution,
    profile: &ReportingProfile,
    key: &str,
) -> Result<DiscreteOutcomeDistribution, DistributionError> {
    let p = truth.success_prob();
    let clamp = |p: f64| p.clamp(0.01, 0.99);
    match profile {
        ReportingProfile::Truthful => Ok(truth.clone()),
        ReportingProfile::Overconfident { gamma, delta } => {
            Ok(spread(truth, *gamma).with_success_prob(clamp(p + delta)))
        }
        ReportingProfile::Underconfident { gamma, delta } => {
            Ok(spread(truth, *gamma).with_success_prob(clamp(p - delta)))
        }
        ReportingProfile::Noisy { jitter } => {
            let times: Vec<f64> = truth.time_marginal().atoms().iter().map(|a| a.0).collect();
            let mut factor = BTreeMap::new();
            for (j, t) in times.iter().enumerate() {
                let u = hashed_unit(&[key.as_bytes(), &(j as u64).to_le_bytes()]);
                factor.insert(t.to_bits(), 1.0 + jitter * (2.0 * u - 1.0));
            }
            Ok(truth
                .map_times(|t| (t * factor.get(&t.to_bits()).copied().unwrap_or(1.0)).max(MIN_TIME))
                .with_success_prob(clamp(p)))
        }
    }
}

/// Scales finite completion times around the time median by `gamma`.
fn spread(truth: &DiscreteOutcomeDistribution, gamma: f64) -> DiscreteOutcomeDistribution {
    let med = truth.time_marginal().quantile(0.5);
    if !med.is_finite() {
        return truth.clone();
    }
    truth.map_times(|t| {
        if t.is_finite() {
            (med + gamma * (t - med)).max(MIN_TIME)
        } else {
            t
        }
    })
}

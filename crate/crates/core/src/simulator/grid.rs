//! Cartesian experiment grids over mechanisms, parameters and seeds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::ReportingProfile;
use crate::clearinghouse::Mechanism;
use crate::util::fmt_sig9;

use super::engine::{run_with, RunOptions};
use super::{MetricsReport, Roster, ScenarioConfig, SimError, METRIC_COLUMNS};

/// A base scenario and the axes to sweep. Empty axes keep the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub base: ScenarioConfig,
    #[serde(default)]
    pub mechanisms: Vec<Mechanism>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub lambdas: Vec<f64>,
    /// Multipliers on every template's arrival rate.
    #[serde(default)]
    pub arrival_scales: Vec<f64>,
    /// Multipliers on every agent's failure rate.
    #[serde(default)]
    pub failure_scales: Vec<f64>,
    /// Reporting profiles imposed on every agent.
    #[serde(default)]
    pub reporting: Vec<ReportingProfile>,
}

/// One configuration of the grid, seeds excluded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    /// Position in the expanded grid.
    pub index: usize,
    pub mechanism: Mechanism,
    pub lambda: f64,
    pub arrival_scale: f64,
    pub failure_scale: f64,
    /// `roster` when the roster's own profiles are used.
    pub reporting: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub point: GridPoint,
    pub metrics: MetricsReport,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStderr {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(n)`; zero for a single value.
    pub stderr: f64,
    pub n: usize,
}

impl MeanStderr {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let stderr = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Self { mean, stderr, n })
    }

    /// `mean ± stderr` with 9 significant digits.
    pub fn render(&self) -> String {
        format!("{} ± {}", fmt_sig9(self.mean), fmt_sig9(self.stderr))
    }
}

/// Mean and standard error of every metric over the seeds of one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub point: GridPoint,
    pub runs: usize,
    /// In `METRIC_COLUMNS` order; `None` where no seed had a value.
    pub metrics: Vec<Option<MeanStderr>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub rows: Vec<GridRow>,
    pub aggregates: Vec<AggregateRow>,
}

fn reporting_label(p: &ReportingProfile) -> String {
    match p {
        ReportingProfile::Truthful => "truthful".to_string(),
        ReportingProfile::Overconfident { gamma, delta } => {
            format!(
                "overconfident(gamma={},delta={})",
                fmt_sig9(*gamma),
                fmt_sig9(*delta)
            )
        }
        ReportingProfile::Underconfident { gamma, delta } => {
            format!(
                "underconfident(gamma={},delta={})",
                fmt_sig9(*gamma),
                fmt_sig9(*delta)
            )
        }
        ReportingProfile::Noisy { jitter } => format!("noisy(jitter={})", fmt_sig9(*jitter)),
    }
}

fn axis<T: Clone>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

/// Every (point, seed) configuration in index order: mechanisms outermost,
/// then lambda, arrival scale, failure scale, reporting, and seed.
pub fn expand_grid(grid: &GridConfig) -> Result<Vec<(GridPoint, ScenarioConfig)>, SimError> {
    if grid.seeds.is_empty() {
        return Err(SimError::Config("the seed list is empty".to_string()));
    }
    let base = &grid.base;
    let mechanisms = axis(&grid.mechanisms, base.mechanism);
    let lambdas = axis(&grid.lambdas, base.clearing.risk.lambda);
    let arrivals = axis(&grid.arrival_scales, 1.0);
    let failures = axis(&grid.failure_scales, 1.0);
    let reporting: Vec<Option<ReportingProfile>> = if grid.reporting.is_empty() {
        vec![None]
    } else {
        grid.reporting.iter().cloned().map(Some).collect()
    };
    for s in arrivals.iter().chain(&failures) {
        if !(*s >= 0.0) || !s.is_finite() {
            return Err(SimError::Config(
                "scales must be finite values >= 0".to_string(),
            ));
        }
    }
    let mut out = Vec::new();
    let mut index = 0;
    for &mechanism in &mechanisms {
        for &lambda in &lambdas {
            for &arrival_scale in &arrivals {
                for &failure_scale in &failures {
                    for rep in &reporting {
                        let point = GridPoint {
                            index,
                            mechanism,
                            lambda,
                            arrival_scale,
                            failure_scale,
                            reporting: rep.as_ref().map_or("roster".to_string(), reporting_label),
                        };
                        index += 1;
                        for &seed in &grid.seeds {
                            let mut cfg = base.clone();
                            cfg.mechanism = mechanism;
                            cfg.seed = seed;
                            cfg.clearing.risk.lambda = lambda;
                            for t in &mut cfg.task_templates {
                                t.rate_per_hour *= arrival_scale;
                            }
                            if let Roster::Inline(agents) = &mut cfg.roster {
                                for a in agents.iter_mut() {
                                    a.failure_rate = (a.failure_rate * failure_scale).min(1.0);
                                    if let Some(r) = rep {
                                        a.reporting = r.clone();
                                    }
                                }
                            }
                            out.push((point.clone(), cfg));
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Aggregates consecutive rows sharing a grid point.
pub fn aggregate(rows: &[GridRow]) -> Vec<AggregateRow> {
    let mut out: Vec<AggregateRow> = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let idx = rows[start].point.index;
        let end = rows[start..]
            .iter()
            .position(|r| r.point.index != idx)
            .map_or(rows.len(), |k| start + k);
        let group = &rows[start..end];
        let metrics = (0..METRIC_COLUMNS.len())
            .map(|c| {
                let vals: Vec<f64> = group.iter().filter_map(|r| r.metrics.values()[c]).collect();
                MeanStderr::of(&vals)
            })
            .collect();
        out.push(AggregateRow {
            point: rows[start].point.clone(),
            runs: group.len(),
            metrics,
        });
        start = end;
    }
    out
}

/// Runs the whole grid on `jobs` threads (0 = all cores). Row order is the
/// expansion order regardless of scheduling.
pub fn run_grid(grid: &GridConfig, jobs: usize) -> Result<GridResult, SimError> {
    let configs = expand_grid(grid)?;
    for (_, c) in &configs {
        let problems = c.validate();
        if !problems.is_empty() {
            return Err(SimError::Config(problems.join("; ")));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| SimError::Pool(e.to_string()))?;
    let options = RunOptions {
        record_decisions: false,
    };
    let rows = pool.install(|| {
        configs
            .par_iter()
            .map(|(point, cfg)| {
                run_with(cfg, options).map(|o| GridRow {
                    point: point.clone(),
                    metrics: o.metrics,
                })
            })
            .collect::<Result<Vec<_>, _>>()
    })?;
    let aggregates = aggregate(&rows);
    Ok(GridResult { rows, aggregates })
}

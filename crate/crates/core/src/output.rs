//! Result files and text renderings: metrics and aggregate CSVs, JSON-lines
//! logs, the per-run directory, comparison tables, calibration reports and
//! decision replay.
//!
//! `metrics.csv` columns, in order: `index, mechanism, lambda,
//! arrival_scale, failure_scale, reporting, seed`, then every name in
//! [`METRIC_COLUMNS`]. `aggregate.csv` has the same point columns, `runs`,
//! then `<metric>_mean` and `<metric>_stderr` per metric. Numbers use 9
//! significant digits; missing values are empty cells.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::calibration::{CalibrationLedger, KeyStats, PIT_BINS};
use crate::clearinghouse::{evaluate_portfolio, ClearingError, DecisionRecord, Evaluation};
use crate::model::{AgentId, OptionId, TaskId};
use crate::simulator::{
    aggregate, AggregateRow, GridPoint, GridRow, RunOutput, ScenarioConfig, METRIC_COLUMNS,
};
use crate::util::{fmt_sig9, stable_hash};

#[derive(Debug, Error)]
pub enum OutputError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Ledger(#[from] crate::calibration::LedgerError),
    #[error(transparent)]
    Clearing(#[from] ClearingError),
}

const POINT_COLUMNS: [&str; 6] = [
    "index",
    "mechanism",
    "lambda",
    "arrival_scale",
    "failure_scale",
    "reporting",
];

fn cell(v: Option<f64>) -> String {
    v.map(fmt_sig9).unwrap_or_default()
}

fn point_cells(p: &GridPoint) -> Vec<String> {
    vec![
        p.index.to_string(),
        p.mechanism.name().to_string(),
        fmt_sig9(p.lambda),
        fmt_sig9(p.arrival_scale),
        fmt_sig9(p.failure_scale),
        p.reporting.clone(),
    ]
}

/// Hex digest of the scenario as serialized.
pub fn config_hash(cfg: &ScenarioConfig) -> Result<String, OutputError> {
    let bytes = serde_json::to_vec(cfg)?;
    Ok(format!("{:016x}", stable_hash(&[&bytes])))
}

/// Directory name of a run: config hash and seed.
pub fn run_dir_name(cfg: &ScenarioConfig) -> Result<String, OutputError> {
    Ok(format!("{}-seed{}", config_hash(cfg)?, cfg.seed))
}

pub fn write_metrics_csv<W: Write>(w: W, rows: &[GridRow]) -> Result<(), OutputError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = POINT_COLUMNS.to_vec();
    header.push("seed");
    header.extend(METRIC_COLUMNS);
    out.write_record(&header)?;
    for r in rows {
        let mut rec = point_cells(&r.point);
        rec.push(r.metrics.seed.to_string());
        rec.extend(r.metrics.values().into_iter().map(cell));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_aggregate_csv<W: Write>(w: W, rows: &[AggregateRow]) -> Result<(), OutputError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = POINT_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.push("runs".to_string());
    for m in METRIC_COLUMNS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_stderr"));
    }
    out.write_record(&header)?;
    for r in rows {
        let mut rec = point_cells(&r.point);
        rec.push(r.runs.to_string());
        for m in &r.metrics {
            rec.push(cell(m.map(|s| s.mean)));
            rec.push(cell(m.map(|s| s.stderr)));
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, items: &[T]) -> Result<(), OutputError> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>, OutputError> {
    Ok(BufWriter::new(File::create(path)?))
}

/// Grid point of a single run.
pub fn single_point(cfg: &ScenarioConfig) -> GridPoint {
    GridPoint {
        index: 0,
        mechanism: cfg.mechanism,
        lambda: cfg.clearing.risk.lambda,
        arrival_scale: 1.0,
        failure_scale: 1.0,
        reporting: "roster".to_string(),
    }
}

/// Writes the full result of one run under `root/<hash>-seed<seed>/` and
/// returns that directory.
pub fn write_run_dir(
    root: &Path,
    cfg: &ScenarioConfig,
    run: &RunOutput,
) -> Result<PathBuf, OutputError> {
    let dir = root.join(run_dir_name(cfg)?);
    fs::create_dir_all(&dir)?;
    let mut echo = create(&dir.join("config.json"))?;
    serde_json::to_writer_pretty(&mut echo, cfg)?;
    echo.write_all(b"\n")?;
    echo.flush()?;
    let rows = vec![GridRow {
        point: single_point(cfg),
        metrics: run.metrics.clone(),
    }];
    write_metrics_csv(create(&dir.join("metrics.csv"))?, &rows)?;
    write_aggregate_csv(create(&dir.join("aggregate.csv"))?, &aggregate(&rows))?;
    write_jsonl(create(&dir.join("events.jsonl"))?, &run.events)?;
    run.ledger.write_jsonl(create(&dir.join("ledger.jsonl"))?)?;
    write_jsonl(create(&dir.join("decisions.jsonl"))?, &run.decisions)?;
    Ok(dir)
}

fn render_grid(header: &[String], rows: &[Vec<String>]) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|c| {
            rows.iter()
                .map(|r| r[c].chars().count())
                .chain([header[c].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect();
        padded.join("  ").trim_end().to_string()
    };
    let mut s = line(header);
    s.push('\n');
    s.push_str(&line(
        &widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>(),
    ));
    s.push('\n');
    for r in rows {
        s.push_str(&line(r));
        s.push('\n');
    }
    s
}

/// Metrics shown in the comparison table.
pub const TABLE_METRICS: [&str; 8] = [
    "mission_success_rate",
    "deadline_violation_rate",
    "safety_violation_rate",
    "risk_adjusted_utility",
    "reassignment_latency",
    "message_count",
    "mean_brier",
    "mean_crps",
];

/// Point × metric table with `mean ± stderr` cells.
pub fn render_comparison(rows: &[AggregateRow]) -> String {
    let cols: Vec<usize> = TABLE_METRICS
        .iter()
        .map(|m| {
            METRIC_COLUMNS
                .iter()
                .position(|c| c == m)
                .expect("known metric")
        })
        .collect();
    let mut header = vec![
        "mechanism".to_string(),
        "lambda".to_string(),
        "arrival".to_string(),
        "failure".to_string(),
        "reporting".to_string(),
        "runs".to_string(),
    ];
    header.extend(TABLE_METRICS.iter().map(|m| m.to_string()));
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let mut cells = vec![
                r.point.mechanism.name().to_string(),
                fmt_sig9(r.point.lambda),
                fmt_sig9(r.point.arrival_scale),
                fmt_sig9(r.point.failure_scale),
                r.point.reporting.clone(),
                r.runs.to_string(),
            ];
            cells.extend(
                cols.iter()
                    .map(|&c| r.metrics[c].map_or("-".to_string(), |m| m.render())),
            );
            cells
        })
        .collect();
    render_grid(&header, &body)
}

/// Calibration summary of one (agent, option).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationRow {
    pub agent_id: AgentId,
    pub option_id: OptionId,
    pub count: u64,
    pub mean_brier: Option<f64>,
    pub mean_crps: Option<f64>,
    pub pit: [u64; PIT_BINS],
    pub pit_chi_square: f64,
}

pub fn calibration_rows(ledger: &CalibrationLedger) -> Vec<CalibrationRow> {
    ledger
        .stats()
        .iter()
        .map(
            |((a, o), s): (&(AgentId, OptionId), &KeyStats)| CalibrationRow {
                agent_id: a.clone(),
                option_id: o.clone(),
                count: s.count,
                mean_brier: s.mean_brier(),
                mean_crps: s.mean_crps(),
                pit: s.pit,
                pit_chi_square: s.pit_chi_square(),
            },
        )
        .collect()
}

pub fn write_calibration_csv<W: Write>(w: W, rows: &[CalibrationRow]) -> Result<(), OutputError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["agent_id", "option_id", "count", "mean_brier", "mean_crps"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..PIT_BINS).map(|i| format!("pit_{i}")));
    header.push("pit_chi_square".to_string());
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.agent_id.to_string(),
            r.option_id.to_string(),
            r.count.to_string(),
            cell(r.mean_brier),
            cell(r.mean_crps),
        ];
        rec.extend(r.pit.iter().map(|c| c.to_string()));
        rec.push(fmt_sig9(r.pit_chi_square));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

const BAR_WIDTH: usize = 40;

/// Text report with a PIT histogram per (agent, option). Bars are scaled
/// to the fullest bin of each histogram.
pub fn render_calibration(rows: &[CalibrationRow]) -> String {
    let mut s = String::new();
    if rows.is_empty() {
        s.push_str("ledger is empty\n");
        return s;
    }
    for r in rows {
        s.push_str(&format!(
            "{} / {}: n={} brier={} crps={} pit_chi2={}\n",
            r.agent_id,
            r.option_id,
            r.count,
            r.mean_brier.map_or("-".to_string(), fmt_sig9),
            r.mean_crps.map_or("-".to_string(), fmt_sig9),
            fmt_sig9(r.pit_chi_square),
        ));
        let max = r.pit.iter().copied().max().unwrap_or(0).max(1);
        for (i, c) in r.pit.iter().enumerate() {
            let len = (*c as usize * BAR_WIDTH).div_ceil(max as usize);
            let line = format!(
                "  [{:.1},{:.1}) {:>6} {}",
                i as f64 / PIT_BINS as f64,
                (i + 1) as f64 / PIT_BINS as f64,
                c,
                "#".repeat(len)
            );
            s.push_str(line.trim_end());
            s.push('\n');
        }
    }
    s
}

/// A logged evaluation next to its recomputation from the logged reports.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayRow {
    pub label: String,
    pub logged: Evaluation,
    pub recomputed: Evaluation,
    pub chosen: bool,
}

/// Re-scores every logged portfolio of `record` with `evaluate_portfolio`.
pub fn replay_decision(record: &DecisionRecord) -> Result<Vec<ReplayRow>, OutputError> {
    let cfg = record.clearing_config();
    let mut out = Vec::new();
    for row in &record.evaluations {
        let Some(p) = row.portfolio(&record.task_id, &record.candidates) else {
            continue;
        };
        let recomputed = evaluate_portfolio(&p, &record.task, &cfg)?;
        let chosen = record.chosen.as_ref().is_some_and(|c| {
            c.primary.agent_id == p.primary.agent_id
                && c.primary.option_id == p.primary.option_id
                && c.backup.as_ref().map(|b| (&b.agent_id, &b.option_id))
                    == p.backup.as_ref().map(|b| (&b.agent_id, &b.option_id))
        });
        let label = match &row.backup {
            Some(b) => format!(
                "{}/{} + {}/{}",
                row.primary.agent_id, row.primary.option_id, b.agent_id, b.option_id
            ),
            None => format!("{}/{}", row.primary.agent_id, row.primary.option_id),
        };
        out.push(ReplayRow {
            label,
            logged: row.evaluation.clone(),
            recomputed,
            chosen,
        });
    }
    Ok(out)
}

/// The candidate table of one clearing round for one task.
pub fn render_replay(record: &DecisionRecord, rows: &[ReplayRow]) -> String {
    let mut s = format!(
        "round {} at t={} mechanism={} task={} remaining_deadline={}\n",
        record.round,
        fmt_sig9(record.time),
        record.mechanism,
        record.task_id,
        fmt_sig9(record.task.deadline)
    );
    let header: Vec<String> = [
        "",
        "portfolio",
        "score",
        "recomputed",
        "E[U]",
        "risk",
        "cost",
        "feasible",
        "deadline_slack",
    ]
    .iter()
    .map(|h| h.to_string())
    .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                if r.chosen { "*" } else { "" }.to_string(),
                r.label.clone(),
                fmt_sig9(r.logged.score),
                fmt_sig9(r.recomputed.score),
                fmt_sig9(r.logged.expected_utility),
                fmt_sig9(r.logged.risk_value),
                fmt_sig9(r.logged.cost),
                r.logged.feasible.to_string(),
                fmt_sig9(r.logged.slacks.deadline),
            ]
        })
        .collect();
    s.push_str(&render_grid(&header, &body));
    if !record.bids.is_empty() {
        let header: Vec<String> = [
            "agent",
            "option",
            "expected_time",
            "cost",
            "bid",
            "declined",
        ]
        .iter()
        .map(|h| h.to_string())
        .collect();
        let body: Vec<Vec<String>> = record
            .bids
            .iter()
            .map(|b| {
                vec![
                    b.agent_id.to_string(),
                    b.option_id.to_string(),
                    fmt_sig9(b.expected_time),
                    fmt_sig9(b.cost),
                    fmt_sig9(b.bid),
                    b.declined.to_string(),
                ]
            })
            .collect();
        s.push_str(&render_grid(&header, &body));
    }
    match &record.chosen {
        Some(p) => s.push_str(&format!(
            "chosen: {}/{}{}\n",
            p.primary.agent_id,
            p.primary.option_id,
            p.backup
                .as_ref()
                .map(|b| format!(
                    " backup {}/{} at +{}",
                    b.agent_id,
                    b.option_id,
                    p.backup_trigger_time.map_or("-".to_string(), fmt_sig9)
                ))
                .unwrap_or_default()
        )),
        None => s.push_str("chosen: none\n"),
    }
    s
}

/// Decision records of `task` in log order.
pub fn decisions_for<'a>(log: &'a [DecisionRecord], task: &TaskId) -> Vec<&'a DecisionRecord> {
    log.iter().filter(|d| &d.task_id == task).collect()
}

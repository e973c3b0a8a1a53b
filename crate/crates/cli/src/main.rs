//! `roc`: run scenarios, compare mechanisms, inspect calibration and replay
//! clearing decisions.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration or input
//! error, 3 task not found in a decision log.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};
use roc_core::calibration::CalibrationLedger;
use roc_core::clearinghouse::DecisionRecord;
use roc_core::distributions::ReconstructionConfig;
use roc_core::output::{self, replay_decision};
use roc_core::simulator::{self, GridConfig, ScenarioConfig};
use roc_core::util::fmt_sig9;
use roc_core::{Mechanism, TaskId};

#[derive(Parser)]
#[command(name = "roc", version, about = "Risk-aware option clearing harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its result directory.
    Run(RunArgs),
    /// Run a grid of mechanisms, parameters and seeds.
    Compare(CompareArgs),
    /// Summarize a calibration ledger per agent and option.
    CalibrationReport(CalibrationArgs),
    /// Show the candidate table of a logged clearing round.
    Replay(ReplayArgs),
}

#[derive(Args)]
struct Output {
    /// Output root; results go to a subdirectory named by config hash.
    #[arg(long, env = "ROC_OUT_DIR", default_value = "runs")]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    output: Output,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_mechanism)]
    mechanism: Option<Mechanism>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct CompareArgs {
    /// Grid JSON: a base scenario plus the axes to sweep.
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    output: Output,
    /// Parallel runs; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
    /// Replaces the seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Replaces the mechanism axis; repeatable.
    #[arg(long, value_parser = parse_mechanism)]
    mechanism: Vec<Mechanism>,
    /// Replaces the lambda axis with this single value.
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Args)]
struct CalibrationArgs {
    /// Ledger JSON lines.
    #[arg(long)]
    ledger: PathBuf,
    /// Also write the report as CSV here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ReplayArgs {
    /// Decision log JSON lines.
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    task: String,
    /// Round to show; defaults to the last round that considered the task.
    #[arg(long)]
    round: Option<u64>,
}

fn parse_mechanism(s: &str) -> Result<Mechanism, String> {
    Mechanism::parse(s).ok_or_else(|| {
        let valid: Vec<&str> = Mechanism::ALL.iter().map(|m| m.name()).collect();
        format!(
            "unknown mechanism `{s}`; valid choices: {}",
            valid.join(", ")
        )
    })
}

/// An error that maps to a specific exit code.
#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

fn config_error(message: impl Into<String>) -> anyhow::Error {
    Exit {
        code: 2,
        message: message.into(),
    }
    .into()
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read `{}`: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| config_error(format!("`{}`: {e}", path.display())))
}

fn load_scenario(path: &Path, cfg: &mut ScenarioConfig) -> Result<()> {
    cfg.resolve_roster(path.parent())
        .map_err(|e| config_error(e.to_string()))?;
    let problems = cfg.validate();
    if !problems.is_empty() {
        return Err(config_error(format!(
            "`{}`: {}",
            path.display(),
            problems.join("; ")
        )));
    }
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<()> {
    let mut cfg: ScenarioConfig = read_json(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(m) = args.mechanism {
        cfg.mechanism = m;
    }
    if let Some(l) = args.lambda {
        cfg.clearing.risk.lambda = l;
    }
    load_scenario(&args.config, &mut cfg)?;
    let run = simulator::run(&cfg)?;
    let dir = output::write_run_dir(&args.output.out, &cfg, &run)?;
    let rows = vec![simulator::GridRow {
        point: output::single_point(&cfg),
        metrics: run.metrics.clone(),
    }];
    print!(
        "{}",
        output::render_comparison(&simulator::aggregate(&rows))
    );
    println!(
        "clearing wall time {} s over {} events",
        fmt_sig9(run.diagnostics.clearing_wall_seconds),
        run.diagnostics.events_processed
    );
    println!("wrote {}", dir.display());
    Ok(())
}

fn cmd_compare(args: CompareArgs) -> Result<()> {
    let mut grid: GridConfig = read_json(&args.config)?;
    if let Some(s) = args.seed {
        grid.seeds = vec![s];
    }
    if !args.mechanism.is_empty() {
        grid.mechanisms = args.mechanism;
    }
    if let Some(l) = args.lambda {
        grid.lambdas = vec![l];
    }
    if grid.seeds.is_empty() {
        return Err(config_error("the seed list is empty"));
    }
    load_scenario(&args.config, &mut grid.base)?;
    let result = simulator::run_grid(&grid, args.jobs).map_err(|e| match e {
        simulator::SimError::Config(m) => config_error(m),
        other => other.into(),
    })?;
    let bytes = serde_json::to_vec(&grid)?;
    let hash = roc_core::util::stable_hash(&[&bytes]);
    let dir = args.output.out.join(format!("compare-{hash:016x}"));
    fs::create_dir_all(&dir).with_context(|| format!("creating `{}`", dir.display()))?;
    let mut echo = BufWriter::new(File::create(dir.join("config.json"))?);
    serde_json::to_writer_pretty(&mut echo, &grid)?;
    echo.write_all(b"\n")?;
    echo.flush()?;
    output::write_metrics_csv(File::create(dir.join("metrics.csv"))?, &result.rows)?;
    output::write_aggregate_csv(File::create(dir.join("aggregate.csv"))?, &result.aggregates)?;
    let table = output::render_comparison(&result.aggregates);
    fs::write(dir.join("table.txt"), &table)?;
    print!("{table}");
    println!("{} runs; wrote {}", result.rows.len(), dir.display());
    Ok(())
}

fn cmd_calibration_report(args: CalibrationArgs) -> Result<()> {
    let file = File::open(&args.ledger)
        .map_err(|e| config_error(format!("cannot read `{}`: {e}", args.ledger.display())))?;
    let ledger =
        CalibrationLedger::read_jsonl(BufReader::new(file), ReconstructionConfig::default())
            .map_err(|e| config_error(format!("`{}`: {e}", args.ledger.display())))?;
    let rows = output::calibration_rows(&ledger);
    print!("{}", output::render_calibration(&rows));
    if let Some(path) = args.csv {
        output::write_calibration_csv(File::create(&path)?, &rows)?;
    }
    Ok(())
}

fn read_decisions(path: &Path) -> Result<Vec<DecisionRecord>> {
    let file = File::open(path)
        .map_err(|e| config_error(format!("cannot read `{}`: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| config_error(format!("`{}` line {}: {e}", path.display(), i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

fn cmd_replay(args: ReplayArgs) -> Result<()> {
    let log = read_decisions(&args.log)?;
    let task = TaskId::from(args.task.as_str());
    let records = output::decisions_for(&log, &task);
    let record = match args.round {
        Some(r) => records.into_iter().find(|d| d.round == r),
        None => records.into_iter().last(),
    };
    let Some(record) = record else {
        return Err(Exit {
            code: 3,
            message: format!("task `{task}` not found in `{}`", args.log.display()),
        }
        .into());
    };
    let rows = replay_decision(record)?;
    print!("{}", output::render_replay(record, &rows));
    let worst = rows
        .iter()
        .map(|r| (r.logged.score - r.recomputed.score).abs())
        .fold(0.0, f64::max);
    println!(
        "max |logged - recomputed| score difference: {}",
        fmt_sig9(worst)
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Compare(a) => cmd_compare(a),
        Command::CalibrationReport(a) => cmd_calibration_report(a),
        Command::Replay(a) => cmd_replay(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Exit>().map_or(1, |x| x.code);
            ExitCode::from(code)
        }
    }
}

//! `slowfast-reduce`: experiment runner for slow-fast reduction.

mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;
use slowfast::benchmark::BudgetLevel;
use slowfast::report::{fit_rate, ConvergenceRow};

use config::ExperimentConfig;

/// Default master seed of `validate-toy`.
const DEFAULT_SEED: u64 = 20240501;

#[derive(Parser)]
#[command(name = "slowfast-reduce", version = run::VERSION, about = "Slow-fast SDE reduction experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run { config: PathBuf },
    /// Run the toy-model validation checklist.
    ValidateToy {
        #[arg(long, default_value = "default", value_parser = ["zero", "small", "default", "large"])]
        budget: String,
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value = "validate_toy_out")]
        out: PathBuf,
    },
    /// Fit a log-log rate to a CSV with columns `eps,error,stderr`.
    FitRate { csv: PathBuf },
}

fn prepare(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn finish(dir: &Path, command: serde_json::Value, outcome: run::Outcome, start: Instant) -> Result<ExitCode> {
    print!("{}", outcome.summary);
    run::write_manifest(dir, command, &outcome, start.elapsed().as_secs_f64())?;
    Ok(if outcome.passed { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn read_rows(path: &Path) -> Result<Vec<ConvergenceRow>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize().enumerate() {
        let row: ConvergenceRow = rec.with_context(|| format!("{}: row {}", path.display(), i + 1))?;
        rows.push(row);
    }
    Ok(rows)
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    let start = Instant::now();
    match cli.command {
        Command::Run { config } => {
            let text = std::fs::read_to_string(&config).with_context(|| format!("reading {}", config.display()))?;
            let cfg = ExperimentConfig::parse(&text).with_context(|| config.display().to_string())?;
            let dir = PathBuf::from(&cfg.output_dir);
            prepare(&dir)?;
            std::fs::write(dir.join("config.toml"), &text).context("echoing the config")?;
            let outcome = run::run_experiment(&cfg, &dir)?;
            let cmd = json!({ "subcommand": "run", "config": cfg, "seed": cfg.seed });
            finish(&dir, cmd, outcome, start)
        }
        Command::ValidateToy { budget, seed, out } => {
            let level: BudgetLevel = budget.parse()?;
            prepare(&out)?;
            let outcome = run::run_validation(level, seed, &out)?;
            let cmd = json!({ "subcommand": "validate-toy", "budget": level, "seed": seed });
            finish(&out, cmd, outcome, start)
        }
        Command::FitRate { csv } => {
            let rows = read_rows(&csv)?;
            let fit = fit_rate(&rows)?;
            println!("{}", serde_json::to_string_pretty(&fit)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    // usage errors share the generic error code; 2 is reserved for failed validation
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use memsteer::harness::{
    bench_timing, run_ablation, run_deployment, write_ablation_outputs, write_deployment_outputs, AblationMatrix,
    DeploymentConfig,
};
use memsteer::memory::inspect_snapshot;
use memsteer::sim::find_task;
use memsteer::Error;

#[derive(Parser)]
#[command(name = "memsteer", version, about = "Success-memory guided sampling for a frozen toy policy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a continuous deployment and write episodes, summary and curve.
    Deploy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep an ablation matrix.
    Ablate {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Time the base sampler against the guided pipeline.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1000)]
        decisions: usize,
    },
    /// Summarize and validate a memory snapshot.
    InspectMemory { snapshot: PathBuf },
    /// Print a built-in task definition as JSON, ready to edit and pass as
    /// the `task` field of a config.
    ShowTask { task_id: String },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_ABORTS: u8 = 3;

/// Failure classes that map to distinct exit codes.
enum Failure {
    Config(anyhow::Error),
    Aborts(String),
    Other(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        match e.downcast_ref::<Error>() {
            Some(Error::Config(_)) => Failure::Config(e),
            _ => Failure::Other(e),
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(Failure::Config)?;
    serde_json::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(Failure::Config)
}

fn check_aborts(budget: Option<usize>, aborted: usize) -> Result<(), Failure> {
    match budget {
        Some(b) if aborted > b => Err(Failure::Aborts(format!("{aborted} aborted episodes exceed the budget of {b}"))),
        _ => Ok(()),
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Deploy { config, out } => {
            let cfg: DeploymentConfig = read_json(&config)?;
            let runs = run_deployment(&cfg).map_err(anyhow::Error::from)?;
            write_deployment_outputs(&out, &cfg.guidance_mode.label(), &runs)
                .with_context(|| format!("writing outputs to {}", out.display()))?;
            for r in &runs {
                println!("seed {:>4}: final success {:.3} ({} aborted)", r.seed, r.final_success(), r.aborted());
            }
            let worst = runs.iter().map(|r| r.aborted()).max().unwrap_or(0);
            check_aborts(cfg.abort_budget, worst)
        }
        Command::Ablate { matrix, out } => {
            let m: AblationMatrix = read_json(&matrix)?;
            let cells = run_ablation(&m).map_err(anyhow::Error::from)?;
            write_ablation_outputs(&out, &cells).with_context(|| format!("writing outputs to {}", out.display()))?;
            for c in &cells {
                let (mean, std) = c.mean_std();
                println!("{:<50} {mean:.3} +- {std:.3}", c.name);
            }
            let worst = cells.iter().flat_map(|c| c.runs.iter().map(|r| r.aborted())).max().unwrap_or(0);
            check_aborts(m.base.abort_budget, worst)
        }
        Command::Bench { config, decisions } => {
            let cfg: DeploymentConfig = read_json(&config)?;
            let report = bench_timing(&cfg, decisions).map_err(anyhow::Error::from)?;
            println!("{}", serde_json::to_string_pretty(&report).context("serializing report")?);
            Ok(())
        }
        Command::ShowTask { task_id } => {
            let task = find_task(&task_id).map_err(|e| Failure::Config(e.into()))?;
            println!("{}", serde_json::to_string_pretty(&task).context("serializing task")?);
            Ok(())
        }
        Command::InspectMemory { snapshot } => {
            let report = inspect_snapshot(&snapshot).map_err(anyhow::Error::from)?;
            print!("{report}");
            if report.violations.is_empty() {
                Ok(())
            } else {
                Err(Failure::Other(anyhow::anyhow!("{} invariant violations", report.violations.len())))
            }
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("config error: {e:#}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Aborts(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_ABORTS)
        }
        Err(Failure::Other(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

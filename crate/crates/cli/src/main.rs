use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use dataplane::harness::{report, run_scenario, Backend, RunOptions, ScenarioConfig};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "dataplane", version, about = "Run and inspect dataplane scenarios")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Sim,
    Socket,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario manifest and write its metrics.
    Run {
        manifest: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
        /// Also write the per-operation fabric trace and engine metrics.
        #[arg(long)]
        trace: bool,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Retire ingress workers without draining their connections.
        #[arg(long)]
        abrupt_retire: bool,
    },
    /// Check a manifest and print field diagnostics.
    Validate { manifest: PathBuf },
    /// Recompute the fairness analysis from a metrics CSV.
    Report {
        metrics: PathBuf,
        /// Windows skipped after every join or leave.
        #[arg(long, default_value_t = 0)]
        settle: u32,
    },
}

fn main() -> Result<ExitCode> {
    match Cli::parse().cmd {
        Cmd::Run {
            manifest,
            mode,
            seed,
            trace,
            out,
            abrupt_retire,
        } => {
            let cfg = ScenarioConfig::load(&manifest)?;
            let opts = RunOptions {
                backend: mode.map(|m| match m {
                    Mode::Sim => Backend::Sim,
                    Mode::Socket => Backend::Socket,
                }),
                seed,
                trace,
                abrupt_retire,
            };
            let run = run_scenario(&cfg, opts)?;
            run.write_to(&out)
                .with_context(|| format!("writing results to {}", out.display()))?;
            print!("{}", run.summary_json);
            let v = run.violations();
            if v > 0 {
                eprintln!("{v} violation(s)");
                return Ok(ExitCode::FAILURE);
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Validate { manifest } => match ScenarioConfig::load(&manifest).and_then(|c| c.validate().map(|_| c)) {
            Ok(c) => {
                println!("{}: ok ({} functions, {} tenants)", c.name, c.functions.len(), c.tenants.len());
                Ok(ExitCode::SUCCESS)
            }
            Err(e) => {
                for f in e.fields() {
                    eprintln!("{f}");
                }
                if e.fields().is_empty() {
                    eprintln!("{e}");
                }
                Ok(ExitCode::FAILURE)
            }
        },
        Cmd::Report { metrics, settle } => {
            let csv = std::fs::read_to_string(&metrics).with_context(|| format!("reading {}", metrics.display()))?;
            let r = report(&csv, settle).map_err(anyhow::Error::msg)?;
            println!("{}", serde_json::to_string_pretty(&r)?);
            Ok(ExitCode::SUCCESS)
        }
    }
}

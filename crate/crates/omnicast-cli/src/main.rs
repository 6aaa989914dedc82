use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use omnicast_cli::run::{self, OUTPUT_ENV};
use omnicast_cli::ExperimentConfig;

#[derive(Parser)]
#[command(name = "omnicast", version, about = "Forecasts with vanishing decision swap regret")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = OUTPUT_ENV, default_value = "omnicast-out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Run the online forecaster and write transcript, curves and reports.
    Run(Common),
    /// Brute-force the basis against the configured losses.
    AuditBasis(Common),
    /// Train a randomized predictor and estimate its omniprediction regret.
    Batch(Common),
    /// Re-audit a stored transcript.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        transcript: PathBuf,
    },
}

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let cfg = ExperimentConfig::load(&c.config)?.with_seed(c.seed);
    let base = c.config.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((cfg, base))
}

fn verdict(passed: bool, what: &str, dir: &Path) -> ExitCode {
    println!("{what}: {} ({})", if passed { "pass" } else { "FAIL" }, dir.display());
    if passed {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    Ok(match cli.command {
        Command::Run(c) => {
            let (cfg, base) = load(&c)?;
            let out = run::execute(&cfg, &base)?;
            run::write_run(&out, &c.out)?;
            verdict(out.audited.regret.passed, "run", &c.out)
        }
        Command::AuditBasis(c) => {
            let (cfg, _) = load(&c)?;
            let report = run::basis_audit(&cfg)?;
            run::write_basis(&report, &c.out)?;
            verdict(report.passed, "audit-basis", &c.out)
        }
        Command::Batch(c) => {
            let (cfg, _) = load(&c)?;
            let (pred, report) = run::batch(&cfg)?;
            run::write_batch(&pred, &report, &c.out)?;
            verdict(report.passed, "batch", &c.out)
        }
        Command::Report { common, transcript } => {
            let (cfg, _) = load(&common)?;
            let audited = run::report(&cfg, &transcript)?;
            run::write_audit(&audited, &common.out)?;
            verdict(audited.regret.passed, "report", &common.out)
        }
    })
}

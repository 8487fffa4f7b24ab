use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use probsafe::config::ExperimentConfig;
use probsafe::error::{HarnessError, Result};
use probsafe::experiment::{compare_controllers, reference_field, run_experiment, ExperimentReport};
use probsafe::oracles::run_oracles;
use probsafe::output::write_outputs;
use probsafe_core::cde_field::{write_field, write_field_csv};

#[derive(Parser)]
#[command(name = "probsafe", version, about = "Long-term safe probability experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Compute the safe-probability field of a config and save it.
    Field {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate one controller and write time series and plots.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate several controllers on shared noise and compare them.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        configs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check solvers and controllers against closed-form values.
    ValidateOracles {
        #[arg(long, default_value_t = 2024)]
        seed: u64,
    },
}

fn check_fallbacks(reports: &[ExperimentReport], configs: &[ExperimentConfig]) -> Result<()> {
    for (r, c) in reports.iter().zip(configs) {
        let rate = r.fallback_rate();
        if rate > c.simulation.max_fallback_rate {
            return Err(HarnessError::FallbackRate {
                label: r.metadata.label.clone(),
                rate,
                limit: c.simulation.max_fallback_rate,
            });
        }
    }
    Ok(())
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn field(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let field = reference_field(&cfg)?;
    std::fs::create_dir_all(out)
        .map_err(|source| HarnessError::Io { context: format!("creating {}", out.display()), source })?;
    let txt = out.join("field.txt");
    let csv = out.join("field.csv");
    write_field(&field, &txt)?;
    write_field_csv(&field, &csv)?;
    let resolved = out.join("config.resolved.toml");
    std::fs::write(&resolved, cfg.to_toml())
        .map_err(|source| HarnessError::Io { context: format!("writing {}", resolved.display()), source })?;
    print_written(&[txt, csv, resolved]);
    Ok(())
}

fn simulate(config: &Path, out: &Path) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let report = run_experiment(&cfg)?;
    let configs = [cfg];
    let reports = [report];
    print_written(&write_outputs(out, &reports, &configs)?);
    check_fallbacks(&reports, &configs)
}

fn compare(paths: &[PathBuf], out: &Path) -> Result<()> {
    let configs = paths.iter().map(|p| ExperimentConfig::load(p)).collect::<Result<Vec<_>>>()?;
    let cmp = compare_controllers(&configs)?;
    print_written(&write_outputs(out, &cmp.reports, &configs)?);
    for s in &cmp.summaries {
        println!(
            "{:<24} mean E[F] {:.4} ± {:.4}  min E[F] {:.4}  terminal P(safe) {:.3}  fallbacks {}",
            s.label,
            s.time_avg_expected,
            s.time_avg_expected_stderr,
            s.min_expected,
            s.terminal_empirical,
            s.fallback_total
        );
    }
    println!("ranking by mean E[F]: {}", cmp.ranking_by_expected().join(" > "));
    check_fallbacks(&cmp.reports, &configs)
}

fn validate_oracles(seed: u64) -> Result<bool> {
    let checks = run_oracles(seed)?;
    for c in &checks {
        println!("{c}");
    }
    Ok(checks.iter().all(|c| c.passed()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Field { config, out } => field(&config, &out).map(|_| true),
        Command::Simulate { config, out } => simulate(&config, &out).map(|_| true),
        Command::Compare { configs, out } => compare(&configs, &out).map(|_| true),
        Command::ValidateOracles { seed } => validate_oracles(seed),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(4),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

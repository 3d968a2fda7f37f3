use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use sync_mrac_cli::checks::run_acceptance_checks;
use sync_mrac_cli::config::{f16_default_config, load_config, ExperimentConfig, F16_PRESET_TOML};
use sync_mrac_cli::grid::{run_grid, GridOptions};

#[derive(Parser)]
#[command(
    name = "sync-mrac",
    about = "Synchronisation-oriented adaptive control: batch experiment grids and acceptance checks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment grid of a config file and write CSV/SVG reports.
    Run {
        /// Path to the TOML experiment config.
        config: PathBuf,
        /// Parallel workers for grid cells.
        #[arg(long, default_value_t = 4)]
        workers: usize,
        /// Override the integrator step size.
        #[arg(long)]
        h: Option<f64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the acceptance check suite and print one pass/fail line each.
    Check {
        /// Config whose grid feeds the grid-wide checks (bundled default
        /// when omitted).
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        workers: usize,
    },
    /// Print a bundled config preset to stdout.
    Preset {
        /// Preset name (available: f16).
        name: String,
    },
}

fn load(path: &std::path::Path) -> Result<ExperimentConfig> {
    let config = load_config(path)?;
    for warning in config.observer_warnings() {
        eprintln!("warning: {warning}");
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            config,
            workers,
            h,
            out,
        } => {
            let config = load(&config)?;
            let report = run_grid(
                &config,
                &GridOptions {
                    workers,
                    out_dir_override: out,
                    h_override: h,
                },
            )?;
            println!(
                "ran {} cells -> {}",
                report.outcomes.len(),
                report.summary_file.display()
            );
            for outcome in &report.outcomes {
                let flag = if outcome.metrics.diverged {
                    " [DIVERGED]"
                } else {
                    ""
                };
                println!(
                    "  k_p={:<6} mu={:<4} peak|y|={:.4} rad, TV(u)={:.2}, final||theta~||={:.3}{flag}",
                    outcome.k_p,
                    outcome.mu,
                    outcome.metrics.peak_abs_output,
                    outcome.metrics.input_total_variation,
                    outcome.metrics.final_theta_error,
                );
            }
            if !report.figure_files.is_empty() {
                println!("figures: {} SVG files in {}", report.figure_files.len(), report.out_dir.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Check { config, workers } => {
            let config = match config {
                Some(path) => load(&path)?,
                None => f16_default_config(),
            };
            let outcomes = run_acceptance_checks(&config, workers)?;
            let mut all_passed = true;
            for outcome in &outcomes {
                println!("{}", outcome.render());
                all_passed &= outcome.passed;
            }
            Ok(if all_passed {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Preset { name } => {
            if name == "f16" {
                print!("{F16_PRESET_TOML}");
                Ok(ExitCode::SUCCESS)
            } else {
                anyhow::bail!("unknown preset {name:?} (available: f16)");
            }
        }
    }
}

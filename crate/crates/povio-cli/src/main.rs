//! Experiment harness CLI: `run` executes a configured Monte-Carlo
//! experiment, `metrics` aggregates the per-seed outputs into a CSV table.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use povio::experiment::{collect_records, run, ExperimentConfig, Variant};
use povio::metrics::records_to_csv;

#[derive(Parser)]
#[command(name = "povio", version, about = "Pose-only point/line VIO experiment harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment for every seed.
    Run {
        /// TOML experiment configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (`<out>/<variant>/<seed>/...`).
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Override the config's variant
        /// (popl | points-only-po | popl-no-cull | delayed-baseline).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Aggregate metrics.json files under the output directory into a CSV
    /// table (stdout and `<out>/metrics.csv`).
    Metrics {
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), String> {
    match cli.command {
        Command::Run { config, out, seeds, variant } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| format!("reading {}: {e}", config.display()))?;
            let mut cfg = ExperimentConfig::from_toml_str(&text).map_err(|e| e.to_string())?;
            if let Some(seeds) = seeds {
                if seeds.is_empty() {
                    return Err("--seeds must name at least one seed".into());
                }
                cfg.seeds = seeds;
            }
            if let Some(variant) = variant {
                cfg.variant = variant.parse::<Variant>()?;
            }
            let records = run(&cfg, &out).map_err(|e| e.to_string())?;
            for r in &records {
                println!(
                    "{} seed {}: ate {:.4} m, are {:.4} deg, nees {:.2}, utilization p {:.3} / l {:.3}{}",
                    r.variant,
                    r.seed,
                    r.ate_rmse_m,
                    r.are_rmse_deg,
                    r.mean_nees,
                    r.point_utilization,
                    r.line_utilization,
                    if r.diverged { " [diverged]" } else { "" }
                );
            }
            Ok(())
        }
        Command::Metrics { out } => {
            let records = collect_records(&out).map_err(|e| e.to_string())?;
            if records.is_empty() {
                return Err(format!("no metrics.json files under {}", out.display()));
            }
            let csv = records_to_csv(&records);
            print!("{csv}");
            std::fs::write(out.join("metrics.csv"), &csv)
                .map_err(|e| format!("writing metrics.csv: {e}"))?;
            Ok(())
        }
    }
}

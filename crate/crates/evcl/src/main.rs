use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use evcl::harness::{self, HarnessError, Overrides};

#[derive(Parser)]
#[command(name = "evcl", version, about = "Continual-learning experiments with Bayesian MLPs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every configured method for every seed and append metrics
    Run {
        /// Experiment config (TOML)
        config: PathBuf,
        /// Replace the config's seed list with this single seed
        #[arg(long)]
        seed: Option<u64>,
        /// Run only this method from the config
        #[arg(long)]
        method: Option<String>,
        /// Override the epoch count of every method
        #[arg(long)]
        epochs: Option<usize>,
        /// Write metrics and snapshots here instead of the config's output_dir
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Aggregate a metrics file into per-method average-accuracy curves
    Summarize {
        /// metrics.csv produced by `run`
        metrics: PathBuf,
        /// Where to write the summary (default: summary.csv next to the metrics)
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Render a summary as an SVG line chart
    Plot {
        /// summary.csv produced by `summarize`
        summary: PathBuf,
        /// Output SVG path
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Download the datasets listed under [data.urls] in the config
    Fetch {
        /// Experiment config (TOML)
        config: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.cmd {
        Cmd::Run {
            config,
            seed,
            method,
            epochs,
            output_dir,
        } => {
            let mut cfg = harness::load_config(&config)?;
            harness::apply_overrides(
                &mut cfg,
                &Overrides {
                    seed,
                    method,
                    epochs,
                    output_dir,
                },
            )?;
            let report = harness::run_experiment(&cfg)?;
            println!(
                "{} runs, {} records appended to {}",
                report.runs,
                report.records,
                report.metrics.display()
            );
        }
        Cmd::Summarize { metrics, output } => {
            let summary = harness::summarize(&metrics)?;
            print!("{}", harness::render_table(&summary));
            let out = output.unwrap_or_else(|| metrics.with_file_name("summary.csv"));
            harness::write_summary(&summary, &out)?;
            println!("wrote {}", out.display());
        }
        Cmd::Plot { summary, output } => {
            let summary = harness::load_summary(&summary)?;
            harness::emit_plot(&summary, &output)?;
            println!("wrote {}", output.display());
        }
        Cmd::Fetch { config } => {
            let cfg = harness::load_config(&config)?;
            harness::fetch(&cfg)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

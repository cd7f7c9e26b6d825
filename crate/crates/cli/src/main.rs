use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};
use vclab::aggregate::{aggregate_trials, render_summary};
use vclab::chart::{emit_chart_svg, ChartKind};
use vclab::config::{ExperimentConfig, KEYS};
use vclab::results::read_results_csv;
use vclab::runner::run_experiment;
use vclab::CliError;

#[derive(Parser)]
#[command(name = "vclab", version, about = "Variational continual learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment and write its results CSV.
    ///
    /// Settings are given as `--key value` (or `--key=value`), optionally on
    /// top of a `--config <file>` of `key = value` lines.
    Run {
        #[arg(
            trailing_var_arg = true,
            allow_hyphen_values = true,
            value_name = "--KEY VALUE",
            help = format!("settings; keys: config, {}", KEYS.join(", "))
        )]
        settings: Vec<String>,
    },
    /// Print per-stage mean accuracy and SEM over trials.
    Aggregate { csv: PathBuf },
    /// Write an SVG chart next to the CSV (or to --out).
    Chart {
        csv: PathBuf,
        #[arg(long, default_value = "avg_accuracy")]
        which: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_summaries(csv: &PathBuf) -> anyhow::Result<Vec<vclab::aggregate::StageSummary>> {
    let file = fs::File::open(csv).map_err(|e| CliError::Data(format!("{}: {e}", csv.display())))?;
    let rows = read_results_csv(file)?;
    Ok(aggregate_trials(&rows)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Run { settings } => {
            let cfg = ExperimentConfig::from_args(&settings)?;
            let path = run_experiment(&cfg)?;
            println!("{}", path.display());
        }
        Command::Aggregate { csv } => {
            print!("{}", render_summary(&load_summaries(&csv)?));
        }
        Command::Chart { csv, which, out } => {
            let kind: ChartKind = which.parse()?;
            let svg = emit_chart_svg(&load_summaries(&csv)?, kind)?;
            let out = out.unwrap_or_else(|| csv.with_extension(format!("{which}.svg")));
            fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<CliError>().map_or(1, CliError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

//! `nudge-engine`: simulate → run → analyze → report.
//!
//! Exit codes: 2 configuration error, 3 failure during a run (the message
//! names the week), 4 missing analysis inputs, 1 anything else.

mod commands;
mod error;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use nudge_core::analysis::StratumKind;

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "nudge-engine", version, about = "Adaptive nudging engine")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic event log and its ground-truth population.
    Simulate {
        /// Simulation config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run an experiment against a recorded log or a closed-loop simulation.
    Run {
        /// Experiment config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Recorded event log to replay.
        #[arg(long, conflicts_with = "sim", required_unless_present = "sim")]
        events: Option<PathBuf>,
        /// Simulation config; the simulator reacts to the nudges sent.
        #[arg(long)]
        sim: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the experiment seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Stop once this many weeks are complete.
        #[arg(long)]
        stop_after_week: Option<u32>,
    },
    /// Compute the analysis report for a finished run.
    Analyze {
        /// Run output directory; supplies any input not given explicitly.
        #[arg(long)]
        run: Option<PathBuf>,
        #[arg(long)]
        decisions: Option<PathBuf>,
        #[arg(long)]
        events: Option<PathBuf>,
        /// Final bandit state; enables the sensitivity and embedding sections.
        #[arg(long)]
        state: Option<PathBuf>,
        /// Experiment config, for context column names.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.10)]
        alpha: f64,
        /// Comma-separated: region, baseline_spend, purchase_frequency.
        #[arg(long, value_delimiter = ',')]
        strata: Vec<StratumKind>,
        /// Compute the t-SNE embedding (the default).
        #[arg(long, overrides_with = "no_tsne")]
        tsne: bool,
        #[arg(long, overrides_with = "tsne")]
        no_tsne: bool,
        /// t-SNE seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render the summary table and chart from an analysis report.
    Report {
        /// Analysis output directory or `analysis_report.json`.
        #[arg(long)]
        analysis: PathBuf,
        /// Defaults to the analysis directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var("NUDGE_ENGINE_THREADS") else { return Ok(()) };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| CliError::Usage(format!("NUDGE_ENGINE_THREADS must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(format!("cannot size thread pool: {e}")))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Simulate { config, out, seed } => {
            commands::simulate(commands::SimulateArgs { config: config.as_deref(), out: &out, seed })
        }
        Command::Run { config, events, sim, out, seed, resume, stop_after_week } => commands::run(commands::RunArgs {
            config: &config,
            events: events.as_deref(),
            sim: sim.as_deref(),
            out: &out,
            seed,
            resume,
            stop_after_week,
        }),
        Command::Analyze { run, decisions, events, state, config, out, alpha, strata, tsne: _, no_tsne, seed } => {
            commands::analyze_cmd(commands::AnalyzeArgs {
                run_dir: run.as_deref(),
                decisions: decisions.as_deref(),
                events: events.as_deref(),
                state: state.as_deref(),
                config: config.as_deref(),
                out: &out,
                alpha,
                strata,
                tsne: !no_tsne,
                seed,
            })
        }
        Command::Report { analysis, out } => {
            let out = out.unwrap_or_else(|| if analysis.is_dir() { analysis.clone() } else { analysis.parent().map(PathBuf::from).unwrap_or_default() });
            commands::report_cmd(&analysis, &out)
        }
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

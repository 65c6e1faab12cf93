use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use nudge_core::analysis::report::{accumulated_difference_svg, summary_markdown, write_report, REPORT_FILE};
use nudge_core::analysis::{analyze, AnalysisOptions, AnalysisReport, StratumKind, TsneOptions};
use nudge_core::bandit::BanditState;
use nudge_core::orchestrator::{decisions_from_jsonl, decisions_to_jsonl, ExperimentConfig, ExperimentRun, OrchestratorError, World};
use nudge_core::recommender::parse_stock_list;
use nudge_core::simulator::{PopulationFile, SimConfig, Simulator};
use nudge_core::util::sha256_hex;

use crate::error::CliError;
use crate::files::{create_dir, events_jsonl, json_pretty, load_config, now, read_events, write_atomic, RunManifest};

pub const DECISIONS_FILE: &str = "decisions.jsonl";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const STATE_FILE: &str = "bandit_state.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const CONFIG_COPY_FILE: &str = "experiment_config.json";
pub const POPULATION_FILE: &str = "population.json";
pub const SUMMARY_FILE: &str = "summary.md";
pub const CHART_FILE: &str = "accumulated_difference.svg";

fn load_sim_config(path: Option<&Path>, seed: Option<u64>) -> Result<SimConfig, CliError> {
    let mut config: SimConfig = match path {
        Some(p) => load_config(p)?,
        None => SimConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    let shown = path.unwrap_or(Path::new("<defaults>"));
    config.validate().map_err(|e| CliError::config(shown, e.to_string()))?;
    Ok(config)
}

pub struct SimulateArgs<'a> {
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub seed: Option<u64>,
}

pub fn simulate(args: SimulateArgs<'_>) -> Result<(), CliError> {
    let started = now();
    let config = load_sim_config(args.config, args.seed)?;
    let sim = Simulator::new(config.clone()).map_err(|e| CliError::config(args.config.unwrap_or(Path::new("<defaults>")), e.to_string()))?;
    create_dir(args.out)?;

    let events_path = args.out.join(EVENTS_FILE);
    write_atomic(&events_path, events_jsonl(&sim.generate_log()).as_bytes())?;
    let population = PopulationFile { config: config.clone(), anchor: sim.anchor, pharmacies: sim.population.clone() };
    let population_path = args.out.join(POPULATION_FILE);
    write_atomic(&population_path, json_pretty(&population).as_bytes())?;

    let mut manifest = RunManifest::new("simulate", args.out, started);
    manifest.config_paths.extend(args.config.map(|p| p.display().to_string()));
    manifest.seeds.insert("simulation".into(), config.seed);
    manifest.finish(&[events_path, population_path])?;
    Ok(())
}

/// Weekly checkpoint: the run state plus what it was started from.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    config_sha256: String,
    simulation: Option<SimConfig>,
    run: ExperimentRun,
}

pub struct RunArgs<'a> {
    pub config: &'a Path,
    pub events: Option<&'a Path>,
    pub sim: Option<&'a Path>,
    pub out: &'a Path,
    pub seed: Option<u64>,
    pub resume: bool,
    pub stop_after_week: Option<u32>,
}

fn load_experiment(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut config: ExperimentConfig = load_config(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let (None, Some(file)) = (&config.stock, &config.stock_file) {
        let stock_path = path.parent().unwrap_or(Path::new(".")).join(file);
        let text = fs::read_to_string(&stock_path).map_err(|e| CliError::config(path, format!("field `stock_file`: {}: {e}", stock_path.display())))?;
        config.stock = Some(parse_stock_list(&text).into_iter().collect());
    }
    config.validate().map_err(|e| CliError::config(path, e.to_string()))?;
    Ok(config)
}

fn run_error(e: OrchestratorError, config_path: &Path) -> CliError {
    match e {
        OrchestratorError::InvalidConfig { .. } => CliError::config(config_path, e.to_string()),
        other => CliError::Run { week: other.week(), message: other.to_string() },
    }
}

pub fn run(args: RunArgs<'_>) -> Result<(), CliError> {
    let started = now();
    let config = load_experiment(args.config, args.seed)?;
    let config_json = serde_json::to_string(&config).expect("config serializes");
    let config_sha = sha256_hex(config_json.as_bytes());
    create_dir(args.out)?;

    let simulation = match args.sim {
        Some(p) => Some(load_sim_config(Some(p), None)?),
        None => None,
    };
    let checkpoint_path = args.out.join(CHECKPOINT_FILE);
    let events_path = args.out.join(EVENTS_FILE);

    let (world, mut run) = if args.resume && checkpoint_path.exists() {
        let checkpoint: Checkpoint = load_config(&checkpoint_path)?;
        if checkpoint.config_sha256 != config_sha || checkpoint.simulation != simulation {
            return Err(CliError::config(
                args.config,
                "checkpoint was written for a different experiment or simulation config; rerun without --resume",
            ));
        }
        let world = match &simulation {
            Some(sim) => World::simulated(sim.clone(), &config).map_err(|e| run_error(e, args.config))?.0,
            None => World::Replay,
        };
        let mut run = checkpoint.run;
        run.events = read_events(&events_path)?;
        (world, run)
    } else {
        let (world, events) = match (&simulation, args.events) {
            (Some(sim), _) => World::simulated(sim.clone(), &config).map_err(|e| run_error(e, args.config))?,
            (None, Some(path)) => (World::Replay, read_events(path)?),
            (None, None) => return Err(CliError::Usage("run needs --events or --sim".into())),
        };
        (world, ExperimentRun::start(&config, events).map_err(|e| run_error(e, args.config))?)
    };

    while !run.is_finished(&config) && args.stop_after_week.is_none_or(|k| run.completed_weeks < k) {
        run.step(&config, &world).map_err(|e| run_error(e, args.config))?;
        // Events first: a checkpoint must never refer to a log it has not seen.
        write_atomic(&events_path, events_jsonl(&run.events).as_bytes())?;
        let checkpoint = Checkpoint { config_sha256: config_sha.clone(), simulation: simulation.clone(), run };
        write_atomic(&checkpoint_path, serde_json::to_string(&checkpoint).expect("checkpoint serializes").as_bytes())?;
        run = checkpoint.run;
        eprintln!("week {} of {} done", run.completed_weeks, config.duration_weeks);
    }

    let decisions_path = args.out.join(DECISIONS_FILE);
    write_atomic(&decisions_path, decisions_to_jsonl(&run.decisions).as_bytes())?;
    let state_path = args.out.join(STATE_FILE);
    write_atomic(&state_path, json_pretty(&run.state).as_bytes())?;
    let config_copy = args.out.join(CONFIG_COPY_FILE);
    write_atomic(&config_copy, json_pretty(&config).as_bytes())?;

    let mut manifest = RunManifest::new("run", args.out, started);
    manifest.config_paths.push(args.config.display().to_string());
    manifest.config_paths.extend(args.sim.map(|p| p.display().to_string()));
    manifest.config_paths.extend(args.events.map(|p| p.display().to_string()));
    manifest.seeds.insert("experiment".into(), config.seed);
    if let Some(sim) = &simulation {
        manifest.seeds.insert("simulation".into(), sim.seed);
    }
    let mut files = vec![decisions_path, state_path, config_copy, events_path];
    if checkpoint_path.exists() {
        files.push(checkpoint_path);
    }
    manifest.finish(&files)?;
    Ok(())
}

pub struct AnalyzeArgs<'a> {
    pub run_dir: Option<&'a Path>,
    pub decisions: Option<&'a Path>,
    pub events: Option<&'a Path>,
    pub state: Option<&'a Path>,
    pub config: Option<&'a Path>,
    pub out: &'a Path,
    pub alpha: f64,
    pub strata: Vec<StratumKind>,
    pub tsne: bool,
    pub seed: Option<u64>,
}

fn resolve(explicit: Option<&Path>, run_dir: Option<&Path>, name: &str) -> Option<PathBuf> {
    explicit.map(Path::to_path_buf).or_else(|| run_dir.map(|d| d.join(name)))
}

pub fn analyze_cmd(args: AnalyzeArgs<'_>) -> Result<(), CliError> {
    let started = now();
    if !(args.alpha > 0.0 && args.alpha < 1.0) {
        return Err(CliError::Usage(format!("--alpha must lie in (0, 1), got {}", args.alpha)));
    }
    let decisions_path = resolve(args.decisions, args.run_dir, DECISIONS_FILE);
    let events_path = resolve(args.events, args.run_dir, EVENTS_FILE);
    let state_path = resolve(args.state, args.run_dir, STATE_FILE);
    let config_path = resolve(args.config, args.run_dir, CONFIG_COPY_FILE);

    let mut missing = Vec::new();
    for (flag, path, required) in [
        ("--decisions", &decisions_path, true),
        ("--events", &events_path, true),
        ("--state", &state_path, args.state.is_some() || args.run_dir.is_some()),
        ("--config", &config_path, args.config.is_some()),
    ] {
        match path {
            Some(p) if !p.exists() && required => missing.push(format!("{flag} {}", p.display())),
            None if required => missing.push(format!("{flag} (not given)")),
            _ => {}
        }
    }
    if !missing.is_empty() {
        return Err(CliError::MissingInputs(missing));
    }
    let decisions_path = decisions_path.expect("checked");
    let events_path = events_path.expect("checked");

    let text = fs::read_to_string(&decisions_path).map_err(|e| CliError::io(&decisions_path, e))?;
    let decisions = decisions_from_jsonl(&text)
        .map_err(|(line, e)| CliError::Input { path: decisions_path.clone(), message: format!("line {line}: {e}") })?;
    let events = read_events(&events_path)?;
    let state: Option<BanditState> = match state_path.filter(|p| p.exists()) {
        Some(p) => Some(load_config(&p)?),
        None => None,
    };
    let column_names = match config_path.filter(|p| p.exists()) {
        Some(p) => Some(load_config::<ExperimentConfig>(&p)?.context.column_names()),
        None => None,
    };

    let options = AnalysisOptions {
        alpha: args.alpha,
        strata: args.strata,
        tsne: args.tsne.then(|| TsneOptions { seed: args.seed.unwrap_or(0), ..TsneOptions::default() }),
    };
    let report = analyze(&decisions, &events, state.as_ref(), column_names.as_deref(), &options)
        .map_err(|e| CliError::Input { path: decisions_path.clone(), message: e.to_string() })?;

    let mut files = write_report(&report, args.out).map_err(|e| CliError::io(args.out, e))?;
    let chart = args.out.join(CHART_FILE);
    write_atomic(&chart, accumulated_difference_svg(&report).as_bytes())?;
    files.push(chart);

    let mut manifest = RunManifest::new("analyze", args.out, started);
    manifest.config_paths.push(decisions_path.display().to_string());
    manifest.config_paths.push(events_path.display().to_string());
    if let Some(seed) = args.seed {
        manifest.seeds.insert("tsne".into(), seed);
    }
    manifest.finish(&files)?;
    Ok(())
}

pub fn report_cmd(analysis: &Path, out: &Path) -> Result<(), CliError> {
    let started = now();
    let input = if analysis.is_dir() { analysis.join(REPORT_FILE) } else { analysis.to_path_buf() };
    if !input.exists() {
        return Err(CliError::MissingInputs(vec![format!("--analysis {}", input.display())]));
    }
    let report: AnalysisReport = load_config(&input)?;
    create_dir(out)?;
    let summary = out.join(SUMMARY_FILE);
    write_atomic(&summary, summary_markdown(&report).as_bytes())?;
    let chart = out.join(CHART_FILE);
    write_atomic(&chart, accumulated_difference_svg(&report).as_bytes())?;
    let mut manifest = RunManifest::new("report", out, started);
    manifest.config_paths.push(input.display().to_string());
    manifest.finish(&[summary, chart])?;
    Ok(())
}

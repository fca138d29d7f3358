use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use nasloop::analytics::{build_trajectories, summarize, write_report, CorrelationBasis, SummaryOptions, DEFAULT_SMOOTHING_WINDOW};
use nasloop::config::{BackendKind, CliConfig};
use nasloop::experiment::{compare_ablations, simulate_run, RunSummary};
use nasloop::search::{read_log, LogicalClock, SearchLoop, SearchResult};
use nasloop::RunLogRecord;

#[derive(Parser)]
#[command(name = "nasloop", version, about = "LLM-driven architecture search with bounded feedback memory")]
struct Cli {
    /// Overrides the backend selected in the config file.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendKind>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a search from scratch.
    Run(RunArgs),
    /// Continue an interrupted run from its log.
    Resume(ResumeArgs),
    /// Summarize a run log and write CSV series.
    Analyze(AnalyzeArgs),
    /// Compare the full loop against its ablations on the simulated landscape.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Log path; defaults to `log_path` from the config.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Also write the analysis report into this directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overwrite an existing log.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ResumeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "success-order")]
    basis: BasisArg,
    #[arg(long, default_value_t = nasloop::analytics::DEFAULT_PERMUTATIONS)]
    permutations: usize,
    #[arg(long, default_value_t = 0)]
    permutation_seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated seeds or a half-open range `a..b`; overrides the config.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Option<SeedList>,
    /// Write `comparison.json` (and per-run logs when a single seed is given).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum BasisArg {
    SuccessOrder,
    Iteration,
}

#[derive(Clone)]
struct SeedList(Vec<u64>);

fn parse_seeds(text: &str) -> Result<SeedList, String> {
    let text = text.trim();
    if let Some((a, b)) = text.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
        let b: u64 = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
        if a >= b {
            return Err("empty seed range".into());
        }
        return Ok(SeedList((a..b).collect()));
    }
    let seeds = text
        .split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| format!("bad seed `{s}`: {e}")))
        .collect::<Result<Vec<_>, _>>()?;
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(SeedList(seeds))
}

type CmdResult = Result<(), Box<dyn std::error::Error>>;

fn load_config(path: &Path, backend: Option<BackendKind>) -> Result<CliConfig, Box<dyn std::error::Error>> {
    let mut config = CliConfig::load(path)?;
    if let Some(b) = backend {
        config.backend = b;
        config.validate()?;
    }
    Ok(config)
}

fn log_path(arg: Option<PathBuf>, config: &CliConfig) -> Result<PathBuf, String> {
    arg.or_else(|| config.log_path.clone())
        .ok_or_else(|| "no log path: pass --log or set `log_path` in the config".to_string())
}

fn progress_event(record: &RunLogRecord) {
    let event = json!({
        "event": "iteration",
        "iteration": record.iteration,
        "outcome": record.outcome.kind().as_str(),
        "accuracy": record.outcome.accuracy(),
        "best_accuracy": record.best_accuracy_after,
    });
    let _ = writeln!(std::io::stderr().lock(), "{event}");
}

fn build_loop(config: &CliConfig) -> Result<SearchLoop, Box<dyn std::error::Error>> {
    let run_config = config.run_config()?;
    let mut search = SearchLoop::new(run_config, config.backends()?)?
        .with_templates(config.templates()?)
        .with_progress(progress_event);
    if config.backend == BackendKind::Sim {
        search = search.with_clock(LogicalClock::default());
    }
    Ok(search)
}

fn finish(result: &SearchResult, log: &Path, out: Option<&Path>) -> CmdResult {
    let records = read_log(log)?;
    let options = SummaryOptions::default();
    let summary = summarize(&records, &options)?;
    if let Some(dir) = out {
        write_report(dir, &summary, &build_trajectories(&records, DEFAULT_SMOOTHING_WINDOW))?;
    }
    print!("{}", summary.render_table());
    let line = json!({
        "event": "finished",
        "log": log,
        "total_iterations": result.total_iterations,
        "successful_evaluations": result.successful_evaluations,
        "best_accuracy": result.best_candidate.as_ref().map(|_| result.best_accuracy),
        "best_source_hash": result.best_candidate.as_ref().map(|c| c.source_hash.clone()),
    });
    println!("{line}");
    Ok(())
}

fn cmd_run(args: RunArgs, backend: Option<BackendKind>) -> CmdResult {
    let config = load_config(&args.config, backend)?;
    let log = log_path(args.log, &config)?;
    let mut search = build_loop(&config)?;
    let result = search.run_to_file(&log, args.force)?;
    finish(&result, &log, args.out.as_deref())
}

fn cmd_resume(args: ResumeArgs, backend: Option<BackendKind>) -> CmdResult {
    let config = load_config(&args.config, backend)?;
    let log = log_path(args.log, &config)?;
    if !log.exists() {
        return Err(format!("{}: no such log", log.display()).into());
    }
    let mut search = build_loop(&config)?;
    let result = search.resume(&log)?;
    finish(&result, &log, args.out.as_deref())
}

fn cmd_analyze(args: AnalyzeArgs) -> CmdResult {
    let records = read_log(&args.log)?;
    let options = SummaryOptions {
        basis: match args.basis {
            BasisArg::SuccessOrder => CorrelationBasis::SuccessOrder,
            BasisArg::Iteration => CorrelationBasis::Iteration,
        },
        permutations: args.permutations,
        seed: args.permutation_seed,
    };
    let summary = summarize(&records, &options).map_err(|e| format!("{}: {e}", args.log.display()))?;
    write_report(&args.out, &summary, &build_trajectories(&records, DEFAULT_SMOOTHING_WINDOW))?;
    print!("{}", summary.render_table());
    Ok(())
}

fn cmd_simulate(args: SimulateArgs) -> CmdResult {
    let mut config = match &args.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    config.backend = BackendKind::Sim;
    if let Some(SeedList(seeds)) = args.seeds {
        config.seeds = seeds;
    }
    if config.seeds.is_empty() {
        return Err("no seeds configured".into());
    }
    config.validate()?;
    let base = config.run_config()?;

    if let [seed] = config.seeds[..] {
        let mut runs = Vec::new();
        for variant in nasloop::experiment::VARIANTS {
            let log = simulate_run(&base, &config.sim, seed, variant)?;
            if let Some(dir) = &args.out {
                fs::create_dir_all(dir)?;
                fs::write(dir.join(format!("seed{seed}_{variant}.jsonl")), nasloop::search::to_jsonl(&log))?;
            }
            runs.push(RunSummary::from_log(seed, variant, &log));
        }
        let comparison = nasloop::experiment::aggregate(&config.seeds, runs);
        emit_comparison(&comparison, args.out.as_deref())?;
        return Ok(());
    }
    let comparison = compare_ablations(&base, &config.sim, &config.seeds)?;
    emit_comparison(&comparison, args.out.as_deref())
}

fn emit_comparison(comparison: &nasloop::experiment::AblationComparison, out: Option<&Path>) -> CmdResult {
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("comparison.json"), serde_json::to_string_pretty(comparison)? + "\n")?;
    }
    print!("{}", comparison.render_table());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => cmd_run(args, cli.backend),
        Command::Resume(args) => cmd_resume(args, cli.backend),
        Command::Analyze(args) => cmd_analyze(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

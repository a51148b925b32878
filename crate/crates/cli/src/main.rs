use std::path::PathBuf;
use std::process::ExitCode;

use boundary_lab::config::ExperimentConfig;
use boundary_lab::pipeline::{run_stage, Stage, StageOptions};
use boundary_lab::repro::run_repro;
use boundary_lab::Error;
use clap::{Parser, Subcommand};

/// Synthetic agentic-boundary experiments for a conversational music recommender.
///
/// Any argument of the form `--section.key=value` overrides a config field,
/// e.g. `--reward.gamma=0.9` or `--boundary.upper_steps=50`.
#[derive(Parser, Debug)]
#[command(name = "boundary-lab", version)]
struct Cli {
    /// TOML config file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root; each stage writes `<out>/<stage>/`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Root holding earlier stage outputs (defaults to --out).
    #[arg(long, global = true)]
    input: Option<PathBuf>,
    /// Worker threads (default: number of cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the catalog, users and query splits.
    Worldgen,
    /// Single-song GRPO with the repetition penalty.
    TrainBase {
        /// Also write the last step's reward breakdowns.
        #[arg(long)]
        dump_rewards: bool,
    },
    /// Self-distill list samples and fit the internal model.
    Distill,
    /// Cold-start all-agentic training.
    TrainZero,
    /// Labels, curriculum SFT, controllable RL and the upper bound.
    Boundary,
    /// Toy continual-pretraining experiments and sweeps.
    Cptlab,
    /// Evaluate a snapshot and the internal-only baseline.
    Bench {
        /// Policy to evaluate instead of the boundary stage's m1.json.
        #[arg(long)]
        params: Option<PathBuf>,
    },
    /// Every acceptance experiment; exits non-zero if any check fails.
    Repro,
}

/// Pulls `--section.key=value` overrides out of argv before clap sees it.
fn split_overrides(args: impl Iterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let (mut rest, mut overrides) = (Vec::new(), Vec::new());
    for a in args {
        let is_override = a
            .strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .is_some_and(|(k, _)| k.contains('.'));
        if is_override {
            overrides.push(a);
        } else {
            rest.push(a);
        }
    }
    (rest, overrides)
}

fn run() -> Result<bool, Error> {
    let (argv, overrides) = split_overrides(std::env::args());
    let cli = Cli::parse_from(argv);
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::InvalidConfig("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    }
    let cfg = ExperimentConfig::load(cli.config.as_deref(), &overrides, true)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    let input = cli.input.clone().unwrap_or_else(|| out.clone());
    let mut opts = StageOptions::default();
    let stage = match cli.command {
        Command::Worldgen => Stage::Worldgen,
        Command::TrainBase { dump_rewards } => {
            opts.dump_rewards = dump_rewards;
            Stage::TrainBase
        }
        Command::Distill => Stage::Distill,
        Command::TrainZero => Stage::TrainZero,
        Command::Boundary => Stage::Boundary,
        Command::Cptlab => Stage::Cptlab,
        Command::Bench { params } => {
            opts.params = params;
            Stage::Bench
        }
        Command::Repro => {
            let run = run_repro(&cfg, &out)?;
            for r in &run.results {
                println!("{}", r.line());
            }
            let failed = run.results.iter().filter(|r| !r.passed).count();
            println!("{} of {} criteria passed; summary in {}", run.results.len() - failed, run.results.len(), out.join("repro").display());
            return Ok(failed == 0);
        }
    };
    let manifest = run_stage(stage, &cfg, &input, &out, &opts)?;
    println!("{stage}: {} files in {}", manifest.files.len(), out.join(stage.name()).display());
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::InvalidConfig(_) => 2,
                Error::MissingArtifact(_) => 3,
                _ => 1,
            })
        }
    }
}

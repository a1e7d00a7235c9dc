use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use iclsel::datamodels::{export_embeddings, heldout_eval, load_suite, save_embeddings, Routing};
use iclsel::harness::{run_pipeline_with, RunConfig, RunOptions, StageStatus};
use iclsel::pool::PromptPool;

/// Score in-context training examples and select stable subsets.
///
/// The bearer token for remote backends is read from ICLSEL_API_KEY unless
/// the backend config names another variable.
#[derive(Parser)]
#[command(name = "iclsel", version)]
struct Cli {
    /// Worker threads for backend calls and fitting (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(long, short)]
    config: PathBuf,
    /// Output directory; defaults to the config's out_dir, else runs/<name>.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Replace every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Rerun stages whose outputs are cached.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Sample the prompt pool and collect dev margins (plus the held-out pool).
    Collect(RunArgs),
    /// Compute CondAcc, Shapley, and datamodel scores.
    Score(RunArgs),
    /// Select subsets from scores and baselines.
    Select(RunArgs),
    /// Evaluate the selected subsets.
    Eval(RunArgs),
    /// Length/perplexity profiles and diversity reports.
    Analyze(RunArgs),
    /// Run every enabled stage.
    Pipeline {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated subset of stages.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
    },
    /// Held-out correlation and L1 error of a fitted datamodel suite.
    DmEval {
        #[arg(long)]
        suite: PathBuf,
        /// Pool directory of held-out prompts.
        #[arg(long)]
        heldout: PathBuf,
        #[arg(long, value_enum, default_value_t = RoutingArg::Bucketed)]
        routing: RoutingArg,
    },
    /// Export per-example datamodel embeddings as JSONL.
    DmEmbed {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RoutingArg {
    Bucketed,
    Phase1,
}

fn run_stages(args: &RunArgs, stages: Option<Vec<String>>) -> Result<()> {
    let mut cfg = RunConfig::from_file(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seeds.sampling = s;
        cfg.seeds.heldout = s;
        cfg.seeds.selection = s;
        cfg.seeds.evaluation = s;
        cfg.seeds.analysis = s;
    }
    if stages.is_some() {
        cfg.stages = stages;
    }
    let out = args
        .out_dir
        .clone()
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| Path::new("runs").join(&cfg.name));
    let opts = RunOptions {
        force: args.force,
        ..RunOptions::default()
    };
    let manifest = run_pipeline_with(&cfg, &out, opts).with_context(|| format!("run {}", cfg.name))?;
    for s in &manifest.stages {
        let status = match s.status {
            StageStatus::Ran => "ran",
            StageStatus::Cached => "cached",
            StageStatus::Failed => "failed",
        };
        println!("{:<8} {:<7} {:>8.2}s  {}", s.stage, status, s.wall_clock_secs, &s.hash[..12]);
    }
    println!("outputs in {}", out.display());
    Ok(())
}

fn stages(names: &[&str]) -> Option<Vec<String>> {
    Some(names.iter().map(|s| s.to_string()).collect())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configure worker pool")?;
    }
    match cli.command {
        Command::Collect(a) => run_stages(&a, stages(&["collect", "heldout"])),
        Command::Score(a) => run_stages(&a, stages(&["score"])),
        Command::Select(a) => run_stages(&a, stages(&["select"])),
        Command::Eval(a) => run_stages(&a, stages(&["eval"])),
        Command::Analyze(a) => run_stages(&a, stages(&["analyze"])),
        Command::Pipeline { run, stages } => run_stages(&run, stages),
        Command::DmEval { suite, heldout, routing } => {
            let suite = load_suite(&suite)?;
            let pool = PromptPool::load(&heldout)?;
            let routing = match routing {
                RoutingArg::Bucketed => Routing::Bucketed,
                RoutingArg::Phase1 => Routing::Phase1Only,
            };
            let report = heldout_eval(&suite, &pool, routing)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::DmEmbed { suite, out } => {
            let suite = load_suite(&suite)?;
            save_embeddings(&export_embeddings(&suite), &out)?;
            println!("wrote {} embeddings to {}", suite.n_train, out.display());
            Ok(())
        }
    }
}

mod manifest;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use couplings::config::PipelineConfig;
use couplings::eval::Method;
use couplings::simulate::Problem;
use couplings::{Error, Result};

use stages::{Ctx, Outcome};

/// Root of all run directories unless overridden.
const RUN_ROOT_ENV: &str = "COUPLINGS_RUN_ROOT";

#[derive(Parser)]
#[command(name = "couplings", version, about = "Surrogate training and sensor placement pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML configuration; built-in defaults for `--problem` when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `data.size=200`.
    #[arg(long = "set", value_name = "PATH=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    problem: Option<Problem>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for dataset generation and experiment runs.
    #[arg(long, default_value_t = 1, global = true)]
    jobs: usize,
    /// Rerun stages even when their manifests are fresh.
    #[arg(long, global = true)]
    force: bool,
    /// Run-directory root; defaults to $COUPLINGS_RUN_ROOT or ./runs.
    #[arg(long, global = true)]
    root: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the effective configuration as TOML.
    Init {
        /// Destination; stdout when absent.
        out: Option<PathBuf>,
    },
    /// Print the run directory of the effective configuration.
    Where,
    /// Simulate the training dataset.
    Generate {
        /// Number of training pairs.
        #[arg(long)]
        m: Option<usize>,
    },
    /// Train the solution and parameter decoders.
    TrainInr,
    /// Encode every training pair into its joint code.
    Encode,
    /// Train the energy model and write the surrogate.
    TrainEbm,
    /// Place sensors for one run of the experiment.
    Place {
        #[arg(long)]
        method: Method,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Sample the posterior of one placed run and score it.
    Infer {
        #[arg(long)]
        method: Method,
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Run the experiment for the configured or given methods.
    Evaluate {
        #[arg(long)]
        method: Vec<Method>,
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Every stage up to the evaluation; completed stages are reused.
    Pipeline,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } => 2,
        Error::MissingArtifact { .. } => 3,
        Error::Numerical { .. } => 4,
        _ => 1,
    }
}

fn load_config(g: &Global, extra: &[String]) -> Result<PipelineConfig> {
    let base = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::desk(g.problem.unwrap_or(Problem::Bvp), g.seed.unwrap_or(0)),
    };
    let mut overrides = Vec::new();
    if g.config.is_some() {
        if let Some(p) = g.problem {
            overrides.push(format!("problem=\"{p}\""));
        }
    }
    if let Some(s) = g.seed {
        overrides.push(format!("seed={s}"));
    }
    overrides.extend(g.overrides.iter().cloned());
    overrides.extend(extra.iter().cloned());
    base.with_overrides(&overrides)
}

fn report(name: &str, outcome: Outcome) {
    let what = match outcome {
        Outcome::Ran => "done",
        Outcome::Cached => "cached",
    };
    eprintln!("{name}: {what}");
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut extra = Vec::new();
    match &cli.command {
        Command::Generate { m: Some(m) } => extra.push(format!("data.size={m}")),
        Command::Evaluate { method, runs } => {
            if let Some(r) = runs {
                extra.push(format!("experiment.runs={r}"));
            }
            if !method.is_empty() {
                let names: Vec<String> = method.iter().map(|m| format!("\"{m}\"")).collect();
                extra.push(format!("experiment.methods=[{}]", names.join(",")));
            }
        }
        _ => {}
    }
    let cfg = load_config(g, &extra)?;
    let root = g
        .root
        .clone()
        .or_else(|| std::env::var_os(RUN_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"));
    if g.jobs == 0 {
        return Err(Error::config("--jobs", "must be positive"));
    }
    let ctx = Ctx { cfg, jobs: g.jobs, force: g.force, root };
    match cli.command {
        Command::Init { out } => {
            let text = ctx.cfg.to_toml();
            match out {
                Some(p) => std::fs::write(p, text)?,
                None => print!("{text}"),
            }
            return Ok(());
        }
        Command::Where => {}
        Command::Generate { .. } => report("generate", stages::generate(&ctx)?),
        Command::TrainInr => report("train-inr", stages::train_inr(&ctx)?),
        Command::Encode => report("encode", stages::encode(&ctx)?),
        Command::TrainEbm => report("train-ebm", stages::train_ebm(&ctx)?),
        Command::Place { method, run } => report("place", stages::place(&ctx, method, run)?),
        Command::Infer { method, run } => report("infer", stages::infer(&ctx, method, run)?),
        Command::Evaluate { .. } => {
            report("evaluate", stages::evaluate(&ctx)?);
            println!("{}", ctx.eval_dir().display());
            return Ok(());
        }
        Command::Pipeline => {
            for (name, outcome) in stages::pipeline(&ctx)? {
                report(name, outcome);
            }
            println!("{}", ctx.eval_dir().display());
            return Ok(());
        }
    }
    println!("{}", ctx.run_dir().display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

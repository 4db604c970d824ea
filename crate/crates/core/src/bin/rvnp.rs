//! Command-line driver: `rvnp <stage> [--config run.toml] [overrides]`.
//!
//! Each stage subcommand runs whatever earlier stages it needs; with
//! `--resume` stages already completed for the same inputs are skipped.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rvnp::pipeline::{report, run_pipeline, run_sweep, Method, RunConfig, RunPaths, Target};
use rvnp::simulators::TaskConfig;

#[derive(Parser)]
#[command(name = "rvnp", version, about = "Robust neural posterior estimation under simulator misspecification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// npe, nnpe, rvnp, rvnp-global, rvnp-t or rvnp-global-t.
    #[arg(long, global = true)]
    method: Option<String>,
    /// Number of observations.
    #[arg(long = "n-obs", global = true)]
    n_obs: Option<usize>,
    /// cs, sir, pendulum or linear-gaussian (default settings of the task).
    #[arg(long, global = true)]
    task: Option<String>,
    /// Skip stages already completed with the same inputs.
    #[arg(long, global = true)]
    resume: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the simulation corpus, observations and test set.
    Simulate,
    /// Fit summary standardization and, for raw series, the InfoMax encoder.
    TrainNse,
    /// Train the likelihood flow.
    TrainFlow,
    /// Train the posterior with the error model (or the baseline posterior).
    TrainRvnp,
    /// Retrain the posterior on error-model-corrupted simulations.
    Tune,
    /// Run everything needed and compute metrics.
    Evaluate,
    /// Run the grid in the config's `[sweep]` section.
    Sweep,
    /// Re-render tables and plots of a finished run or sweep.
    Report,
}

fn load_config(c: &Common, sweep: bool) -> rvnp::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(t) = &c.task {
        if cfg.task.name() != t {
            cfg.task = TaskConfig::named(t)?;
        }
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
        if sweep {
            cfg.sweep.seeds = vec![s];
        }
    }
    if let Some(m) = &c.method {
        let m: Method = m.parse()?;
        cfg.method = m;
        cfg.stages = Default::default();
        if sweep {
            cfg.sweep.methods = vec![m];
        }
    }
    if let Some(n) = c.n_obs {
        cfg.n_obs = n;
        if sweep {
            cfg.sweep.n_obs = vec![n];
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(c: &Common, cfg: &RunConfig) -> PathBuf {
    c.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| {
        PathBuf::from(format!("runs/{}-{}-seed{}", cfg.task.name(), cfg.method.slug(), cfg.seed))
    })
}

fn run(cli: Cli) -> rvnp::Result<()> {
    let c = &cli.common;
    let target = match cli.command {
        Command::Report => {
            let dir = c.out.clone().ok_or_else(|| rvnp::Error::Config("report needs --out".into()))?;
            print!("{}", report(&dir)?);
            return Ok(());
        }
        Command::Sweep => {
            let cfg = load_config(c, true)?;
            let out = c.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| {
                PathBuf::from(format!("runs/sweep-{}", cfg.task.name()))
            });
            let cells = run_sweep(&cfg, &out, c.resume)?;
            let failed = cells.iter().filter(|x| !x.ok()).count();
            print!("{}", report(&out)?);
            if failed > 0 {
                log::warn!("{failed} sweep cells failed; see {}", out.join("sweep.csv").display());
            }
            return Ok(());
        }
        Command::Simulate => Target::Simulate,
        Command::TrainNse => Target::Summaries,
        Command::TrainFlow => Target::Likelihood,
        Command::TrainRvnp => Target::Variational,
        Command::Tune => Target::Tune,
        Command::Evaluate => Target::Evaluate,
    };
    let cfg = load_config(c, false)?;
    let out = out_dir(c, &cfg);
    let outcome = run_pipeline(&cfg, &RunPaths::single(&out), target, c.resume)?;
    let names = |v: &[rvnp::pipeline::Stage]| v.iter().map(|s| s.name()).collect::<Vec<_>>().join(", ");
    println!("ran: [{}]; up to date: [{}]", names(&outcome.executed), names(&outcome.skipped));
    if let Some(dir) = outcome.metrics_dir {
        print!("{}", report(&out)?);
        println!("metrics in {}", dir.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

//! A small sweep over methods, observation counts and seeds, followed by
//! the aggregated report.
//!
//! `cargo run --release --example sweep [out-dir]`

use std::path::PathBuf;

use rvnp::pipeline::{report, run_sweep, RunConfig};

const CONFIG: &str = r#"
version = 1
n_sim = 3000
n_test = 100

[task]
name = "linear-gaussian"
obs_shift = 1.0

[npe.train]
iterations = 20

[nle.train]
iterations = 20

[variational.train]
iterations = 100
patience = 30

[variational.posterior_adam]
warmup_steps = 20

[variational.error_adam]
lr = 1e-2
warmup_steps = 20

[tuning.train]
iterations = 10

[evaluation]
samples = 300

[sweep]
n_obs = [10, 100]
methods = ["npe", "nnpe", "rvnp"]
seeds = [0, 1]
"#;

fn main() -> rvnp::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("rvnp-sweep"));
    let cfg = RunConfig::from_toml(CONFIG)?;
    let cells = run_sweep(&cfg, &out, true)?;
    let failed = cells.iter().filter(|c| !c.ok()).count();
    print!("{}", report(&out)?);
    println!("{failed} failed; plots in {}", out.join("sweep.svg").display());
    Ok(())
}

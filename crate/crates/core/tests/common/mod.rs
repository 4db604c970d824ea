//! Helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rvnp::errormodel::{ErrorArch, ErrorModel, ErrorModelKind};
use rvnp::flows::{ConditionalFlow, FlowArch};
use rvnp::metrics::MetricReport;
use rvnp::networks::{AdamConfig, OptimizerState, TrainConfig};
use rvnp::numcore::{Matrix, RngState};
use rvnp::objectives::{Corruption, DensityObjective, DensityTarget};
use rvnp::pipeline::{Method, RunConfig};

/// A fresh, empty directory under the cargo test scratch area.
pub fn scratch(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

pub fn config(text: &str) -> RunConfig {
    RunConfig::from_toml(text).unwrap_or_else(|e| panic!("bad test config: {e}\n{text}"))
}

/// `(alpha, lpp, nmse)` of a finished run.
pub fn metrics(run_dir: &Path, method: Method) -> (f64, f64, f64) {
    let path = run_dir.join("metrics").join(method.slug()).join("metrics.csv");
    let s = MetricReport::read_scalars(&path).unwrap();
    let get = |k: &str| s.iter().find(|(n, _)| n == k).map(|(_, v)| *v).unwrap();
    (get("alpha"), get("lpp"), get("nmse"))
}

/// Small flow with parameters jittered away from the identity.
pub fn jittered_flow(arch: FlowArch, seed: u64, scale: f64) -> ConditionalFlow {
    let mut rng = RngState::new(seed);
    let f = ConditionalFlow::new(arch.clone(), &mut rng).unwrap();
    let p = f.params().iter().map(|v| v + scale * rng.normal()).collect();
    ConditionalFlow::from_params(arch, p).unwrap()
}

pub fn small_arch(event: usize, context: usize) -> FlowArch {
    FlowArch {
        hidden: 8,
        bins: 4,
        layers: 2,
        ..FlowArch::new(event, context)
    }
}

pub fn jittered_error(kind: ErrorModelKind, theta_dim: usize, obs_dim: usize, seed: u64) -> ErrorModel {
    let mut rng = RngState::new(seed);
    let arch = ErrorArch::new(kind, theta_dim, obs_dim);
    let p = arch.init(&mut rng).iter().map(|v| v + 0.3 * rng.normal()).collect();
    ErrorModel::from_params(arch, p).unwrap()
}

/// Fits a density flow (`q(θ|x)` or `p(x|θ)`) by maximum likelihood.
pub fn fit_flow(which: DensityTarget, arch: FlowArch, theta: &Matrix, x: &Matrix, epochs: usize, seed: u64) -> ConditionalFlow {
    let obj = match which {
        DensityTarget::Posterior => DensityObjective::posterior(arch.clone(), theta.clone(), x.clone(), Corruption::None),
        DensityTarget::Likelihood => DensityObjective::likelihood(arch.clone(), theta.clone(), x.clone()),
    };
    let mut rng = RngState::new(seed);
    let init = ConditionalFlow::new(arch.clone(), &mut rng).unwrap();
    let adam = AdamConfig {
        warmup_steps: 50,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::new(arch.num_params(), adam);
    let cfg = TrainConfig {
        batch_size: 256,
        iterations: epochs,
        patience: epochs,
        ..TrainConfig::default()
    };
    let res = rvnp::networks::train_loop(&obj, init.params().to_vec(), &mut opt, &cfg, &mut rng).unwrap();
    ConditionalFlow::from_params(arch, res.params).unwrap()
}

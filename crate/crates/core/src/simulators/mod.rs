//! Benchmark tasks. Each task pairs a prior and a simulator with a
//! misspecified observation generator that shares the meaning of θ.

pub mod cs;
mod dataset;
pub mod linear;
pub mod pendulum;
pub mod sir;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use cs::CsConfig;
pub use dataset::{build_datasets, draw, DataFile, DataHeader, Datasets, LabelledSet, SetKind, DATA_MAGIC};
pub use linear::LinearGaussianConfig;
pub use pendulum::PendulumConfig;
pub use sir::SirConfig;

use crate::error::Result;
use crate::numcore::RngState;
use crate::objectives::Prior;

/// Task selection plus its constants, as it appears under `[task]` in a
/// run config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum TaskConfig {
    Cs(CsConfig),
    Sir(SirConfig),
    Pendulum(PendulumConfig),
    LinearGaussian(LinearGaussianConfig),
}

impl TaskConfig {
    /// Default constants for a task name.
    pub fn named(name: &str) -> Result<Self> {
        Ok(match name {
            "cs" => TaskConfig::Cs(CsConfig::default()),
            "sir" => TaskConfig::Sir(SirConfig::default()),
            "pendulum" => TaskConfig::Pendulum(PendulumConfig::default()),
            "linear-gaussian" => TaskConfig::LinearGaussian(LinearGaussianConfig::default()),
            other => return Err(crate::Error::Config(format!("unknown task {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TaskConfig::Cs(_) => "cs",
            TaskConfig::Sir(_) => "sir",
            TaskConfig::Pendulum(_) => "pendulum",
            TaskConfig::LinearGaussian(_) => "linear-gaussian",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskConfig::Cs(c) => c.validate(),
            TaskConfig::Sir(c) => c.validate(),
            TaskConfig::Pendulum(c) => c.validate(),
            TaskConfig::LinearGaussian(c) => c.validate(),
        }
    }

    pub fn prior(&self) -> Result<Prior> {
        match self {
            TaskConfig::Cs(c) => c.prior(),
            TaskConfig::Sir(c) => c.prior(),
            TaskConfig::Pendulum(c) => c.prior(),
            TaskConfig::LinearGaussian(c) => c.prior(),
        }
    }

    pub fn theta_dim(&self) -> usize {
        match self {
            TaskConfig::Cs(_) => 3,
            TaskConfig::Sir(_) | TaskConfig::Pendulum(_) => 2,
            TaskConfig::LinearGaussian(c) => c.dim,
        }
    }

    /// Length of one simulator output.
    pub fn data_dim(&self) -> usize {
        match self {
            TaskConfig::Cs(_) => 4,
            TaskConfig::Sir(_) => 6,
            TaskConfig::Pendulum(c) => c.samples,
            TaskConfig::LinearGaussian(c) => c.dim,
        }
    }

    /// Raw series that must be compressed by a learned encoder before
    /// density estimation.
    pub fn needs_encoder(&self) -> bool {
        matches!(self, TaskConfig::Pendulum(_))
    }

    /// Short hex digest of the canonical TOML form.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("task config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One simulator draw, `None` for a degenerate realization.
    pub fn simulate(&self, theta: &[f64], rng: &mut RngState) -> Option<Vec<f64>> {
        match self {
            TaskConfig::Cs(_) => cs::simulate(theta, 0.0, rng),
            TaskConfig::Sir(c) => Some(c.simulate(theta, rng)),
            TaskConfig::Pendulum(c) => Some(pendulum::simulate(theta, c.dt_sim, c.samples, rng)),
            TaskConfig::LinearGaussian(c) => Some(c.simulate(theta, rng)),
        }
    }

    /// One draw from the misspecified observation process.
    pub fn observe(&self, theta: &[f64], rng: &mut RngState) -> Option<Vec<f64>> {
        match self {
            TaskConfig::Cs(c) => cs::simulate(theta, c.rho_core, rng),
            TaskConfig::Sir(c) => Some(c.observe(theta, rng)),
            TaskConfig::Pendulum(c) => Some(pendulum::simulate(theta, c.dt_obs, c.samples, rng)),
            TaskConfig::LinearGaussian(c) => Some(c.observe(theta, rng)),
        }
    }
}

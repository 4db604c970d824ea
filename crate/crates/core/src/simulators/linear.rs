//! Conjugate linear-Gaussian toy: `x = a·θ + σε` with a Gaussian prior,
//! so the exact posterior is available in closed form. Observations may
//! be shifted and carry extra noise.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::RngState;
use crate::objectives::Prior;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinearGaussianConfig {
    pub dim: usize,
    pub prior_std: f64,
    pub gain: f64,
    pub noise: f64,
    /// Constant added to every observed coordinate.
    pub obs_shift: f64,
    /// Standard deviation of extra observation noise.
    pub obs_noise: f64,
}

impl Default for LinearGaussianConfig {
    fn default() -> Self {
        Self {
            dim: 1,
            prior_std: 1.0,
            gain: 1.0,
            noise: 0.5,
            obs_shift: 0.0,
            obs_noise: 0.0,
        }
    }
}

impl LinearGaussianConfig {
    pub fn prior(&self) -> Result<Prior> {
        let p = Prior::Gaussian {
            mean: vec![0.0; self.dim],
            std: vec![self.prior_std; self.dim],
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.prior()?;
        if !(self.noise > 0.0) || !self.gain.is_finite() || self.gain == 0.0 || self.obs_noise < 0.0 {
            return Err(Error::Config("invalid linear-Gaussian constants".into()));
        }
        Ok(())
    }

    pub fn simulate(&self, theta: &[f64], rng: &mut RngState) -> Vec<f64> {
        theta
            .iter()
            .map(|t| self.gain * t + self.noise * rng.normal())
            .collect()
    }

    pub fn observe(&self, theta: &[f64], rng: &mut RngState) -> Vec<f64> {
        self.simulate(theta, rng)
            .into_iter()
            .map(|x| x + self.obs_shift + self.obs_noise * rng.normal())
            .collect()
    }

    /// Exact per-coordinate posterior `(mean, std)` under the simulator.
    pub fn posterior(&self, x: &[f64]) -> Vec<(f64, f64)> {
        let prec = 1.0 / self.prior_std.powi(2) + self.gain.powi(2) / self.noise.powi(2);
        let var = 1.0 / prec;
        x.iter()
            .map(|xi| (var * self.gain * xi / self.noise.powi(2), var.sqrt()))
            .collect()
    }

    /// Exact log evidence `log p(x)` under the simulator.
    pub fn log_evidence(&self, x: &[f64]) -> f64 {
        let var = self.gain.powi(2) * self.prior_std.powi(2) + self.noise.powi(2);
        x.iter()
            .map(|xi| -0.5 * (crate::numcore::LN_2PI + var.ln() + xi * xi / var))
            .sum()
    }
}

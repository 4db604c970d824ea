//! Frictionless pendulum observed through its horizontal position. The
//! observations are sampled on a coarser clock than the simulator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::RngState;
use crate::objectives::Prior;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PendulumConfig {
    pub omega: [f64; 2],
    pub amplitude: [f64; 2],
    pub samples: usize,
    /// Sampling interval of the simulator (seconds).
    pub dt_sim: f64,
    /// Sampling interval of the observations; equal to `dt_sim` for a
    /// well-specified task.
    pub dt_obs: f64,
}

impl Default for PendulumConfig {
    fn default() -> Self {
        Self {
            omega: [0.5, 5.0],
            amplitude: [0.5, 5.0],
            samples: 200,
            dt_sim: 0.05,
            dt_obs: 0.075,
        }
    }
}

impl PendulumConfig {
    pub fn prior(&self) -> Result<Prior> {
        Prior::uniform(
            vec![self.omega[0], self.amplitude[0]],
            vec![self.omega[1], self.amplitude[1]],
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.prior()?;
        if self.omega[0] <= 0.0 || self.amplitude[0] <= 0.0 {
            return Err(Error::Config("pendulum ω₀ and A must be positive".into()));
        }
        if !(self.dt_sim > 0.0 && self.dt_obs > 0.0) || self.samples < 2 {
            return Err(Error::Config("pendulum needs dt > 0 and at least two samples".into()));
        }
        Ok(())
    }
}

/// `A cos(ω₀ k dt + φ)` for `k = 0..n`.
pub fn trace(omega: f64, amplitude: f64, phase: f64, dt: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| amplitude * (omega * (k as f64 * dt) + phase).cos())
        .collect()
}

/// Series with a uniform random phase in `(−π, π)`.
pub fn simulate(theta: &[f64], dt: f64, n: usize, rng: &mut RngState) -> Vec<f64> {
    let phase = rng.uniform_range(-std::f64::consts::PI, std::f64::consts::PI);
    trace(theta[0], theta[1], phase, dt, n)
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Matrix, RngState, Tape, Var, LN_2PI};

/// Prior over θ: independent uniforms (the task priors) or independent
/// Gaussians (used by conjugate checks).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Prior {
    Uniform { low: Vec<f64>, high: Vec<f64> },
    Gaussian { mean: Vec<f64>, std: Vec<f64> },
}

impl Prior {
    pub fn uniform(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        let p = Prior::Uniform { low, high };
        p.validate()?;
        Ok(p)
    }

    pub fn standard_normal(dim: usize) -> Self {
        Prior::Gaussian {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Prior::Uniform { low, high } => {
                !low.is_empty()
                    && low.len() == high.len()
                    && low.iter().zip(high).all(|(a, b)| a.is_finite() && b.is_finite() && a < b)
            }
            Prior::Gaussian { mean, std } => {
                !mean.is_empty()
                    && mean.len() == std.len()
                    && mean.iter().all(|m| m.is_finite())
                    && std.iter().all(|s| s.is_finite() && *s > 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid prior {self:?}")))
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Prior::Uniform { low, .. } => low.len(),
            Prior::Gaussian { mean, .. } => mean.len(),
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        match self {
            Prior::Uniform { low, high } => low.iter().zip(high).map(|(a, b)| 0.5 * (a + b)).collect(),
            Prior::Gaussian { mean, .. } => mean.clone(),
        }
    }

    pub fn std(&self) -> Vec<f64> {
        match self {
            Prior::Uniform { low, high } => low.iter().zip(high).map(|(a, b)| (b - a) / 12f64.sqrt()).collect(),
            Prior::Gaussian { std, .. } => std.clone(),
        }
    }

    /// `max − min` per coordinate; only defined for bounded priors.
    pub fn widths(&self) -> Result<Vec<f64>> {
        match self {
            Prior::Uniform { low, high } => Ok(low.iter().zip(high).map(|(a, b)| b - a).collect()),
            Prior::Gaussian { .. } => Err(Error::arg("a Gaussian prior has no finite width")),
        }
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        match self {
            Prior::Uniform { low, high } => theta
                .iter()
                .zip(low.iter().zip(high))
                .all(|(t, (a, b))| *a <= *t && *t <= *b),
            Prior::Gaussian { .. } => theta.iter().all(|t| t.is_finite()),
        }
    }

    /// Log-density; `-inf` outside the support.
    pub fn log_prob(&self, theta: &[f64]) -> f64 {
        match self {
            Prior::Uniform { low, high } => {
                if self.contains(theta) {
                    -low.iter().zip(high).map(|(a, b)| (b - a).ln()).sum::<f64>()
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::Gaussian { mean, std } => theta
                .iter()
                .zip(mean.iter().zip(std))
                .map(|(t, (m, s))| {
                    let z = (t - m) / s;
                    -0.5 * z * z - s.ln() - 0.5 * LN_2PI
                })
                .sum(),
        }
    }

    pub fn sample(&self, rng: &mut RngState) -> Vec<f64> {
        match self {
            Prior::Uniform { low, high } => low.iter().zip(high).map(|(a, b)| rng.uniform_range(*a, *b)).collect(),
            Prior::Gaussian { mean, std } => mean.iter().zip(std).map(|(m, s)| m + s * rng.normal()).collect(),
        }
    }

    pub fn sample_matrix(&self, n: usize, rng: &mut RngState) -> Matrix {
        let mut out = Matrix::zeros(n, self.dim());
        for i in 0..n {
            let s = self.sample(rng);
            out.row_mut(i).copy_from_slice(&s);
        }
        out
    }

    /// The prior of `(θ − shift) / scale`.
    pub fn affine_image(&self, shift: &[f64], scale: &[f64]) -> Prior {
        let map = |v: &[f64]| -> Vec<f64> {
            v.iter()
                .zip(shift.iter().zip(scale))
                .map(|(x, (m, s))| (x - m) / s)
                .collect()
        };
        match self {
            Prior::Uniform { low, high } => Prior::Uniform {
                low: map(low),
                high: map(high),
            },
            Prior::Gaussian { mean, std } => Prior::Gaussian {
                mean: map(mean),
                std: std.iter().zip(scale).map(|(s, c)| s / c).collect(),
            },
        }
    }

    /// Row-wise log-density of `θ` (`r×m`) as an `r×1` node.
    pub fn log_prob_on_tape(&self, tape: &Tape, theta: Var) -> Var {
        match self {
            Prior::Uniform { .. } => {
                let col: Vec<f64> = tape.value(theta).iter_rows().map(|r| self.log_prob(r)).collect();
                tape.constant(Matrix::col_vector(&col))
            }
            Prior::Gaussian { mean, std } => {
                let inv: Vec<f64> = std.iter().map(|s| 1.0 / s).collect();
                let centered = tape.sub(theta, tape.constant(Matrix::row_vector(mean)));
                let z = tape.mul(centered, tape.constant(Matrix::row_vector(&inv)));
                let norm = std.iter().map(|s| s.ln()).sum::<f64>() + 0.5 * LN_2PI * mean.len() as f64;
                tape.affine(tape.sum_cols(tape.square(z)), -0.5, -norm)
            }
        }
    }
}

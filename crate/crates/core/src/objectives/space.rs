use serde::{Deserialize, Serialize};

use super::prior::Prior;
use crate::error::{Error, Result};
use crate::numcore::{Matrix, Tape, Var};

/// Coordinates in which a posterior flow lives.
///
/// A flow has unbounded support, so under a box prior it can put all of its
/// mass outside the box, where every importance weight is `−inf`. `Logit`
/// avoids that by modelling `v = logit((θ − low) / (high − low))`. The
/// robust loss is invariant to the choice because the prior is transformed
/// with the same Jacobian as the posterior.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ParamSpace {
    /// The flow models θ itself.
    Direct { prior: Prior },
    /// The flow models `v`; `θ = low + (high − low)·σ(v)` under a uniform
    /// prior on the box.
    Logit { low: Vec<f64>, high: Vec<f64> },
}

/// Inputs of `logit` are kept this far inside `(0, 1)`.
const EDGE: f64 = 1e-12;

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl ParamSpace {
    /// `Logit` for a uniform prior, `Direct` otherwise.
    pub fn for_prior(prior: &Prior) -> Self {
        match prior {
            Prior::Uniform { low, high } => ParamSpace::Logit {
                low: low.clone(),
                high: high.clone(),
            },
            p => ParamSpace::Direct { prior: p.clone() },
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ParamSpace::Direct { prior } => prior.dim(),
            ParamSpace::Logit { low, .. } => low.len(),
        }
    }

    /// θ for each row of model coordinates `v`.
    pub fn to_theta(&self, v: &Matrix) -> Matrix {
        match self {
            ParamSpace::Direct { .. } => v.clone(),
            ParamSpace::Logit { low, high } => {
                let mut out = v.clone();
                for i in 0..out.rows() {
                    for (j, x) in out.row_mut(i).iter_mut().enumerate() {
                        let s = 1.0 / (1.0 + (-*x).exp());
                        *x = low[j] + (high[j] - low[j]) * s;
                    }
                }
                out
            }
        }
    }

    /// Model coordinates of θ; θ outside the box is an error.
    pub fn from_theta(&self, theta: &Matrix) -> Result<Matrix> {
        match self {
            ParamSpace::Direct { .. } => Ok(theta.clone()),
            ParamSpace::Logit { low, high } => {
                let mut out = theta.clone();
                for i in 0..out.rows() {
                    for (j, x) in out.row_mut(i).iter_mut().enumerate() {
                        let p = (*x - low[j]) / (high[j] - low[j]);
                        if !(0.0..=1.0).contains(&p) {
                            return Err(Error::arg(format!("θ = {x} outside the prior box")));
                        }
                        let p = p.clamp(EDGE, 1.0 - EDGE);
                        *x = (p / (1.0 - p)).ln();
                    }
                }
                Ok(out)
            }
        }
    }

    /// `log |det ∂θ/∂v|` for one row of model coordinates.
    pub fn log_jacobian(&self, v: &[f64]) -> f64 {
        match self {
            ParamSpace::Direct { .. } => 0.0,
            ParamSpace::Logit { low, high } => v
                .iter()
                .zip(low.iter().zip(high))
                .map(|(x, (a, b))| (b - a).ln() - softplus(-x) - softplus(*x))
                .sum(),
        }
    }

    /// Row-wise prior log-density in model coordinates, `r×1`.
    pub fn log_prior_on_tape(&self, tape: &Tape, v: Var) -> Var {
        match self {
            ParamSpace::Direct { prior } => prior.log_prob_on_tape(tape, v),
            // uniform density times the Jacobian: the box volume cancels
            ParamSpace::Logit { .. } => {
                let s = tape.add(tape.softplus(v), tape.softplus(tape.neg(v)));
                tape.neg(tape.sum_cols(s))
            }
        }
    }

    /// θ rows as a node, for the likelihood and error model.
    pub fn theta_on_tape(&self, tape: &Tape, v: Var) -> Var {
        match self {
            ParamSpace::Direct { .. } => v,
            ParamSpace::Logit { low, high } => {
                let width: Vec<f64> = low.iter().zip(high).map(|(a, b)| b - a).collect();
                let sig = tape.exp(tape.neg(tape.softplus(tape.neg(v))));
                let scaled = tape.mul(sig, tape.constant(Matrix::row_vector(&width)));
                tape.add(scaled, tape.constant(Matrix::row_vector(low)))
            }
        }
    }
}

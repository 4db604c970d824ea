use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::errormodel::ErrorModel;
use crate::flows::{BoundFlow, ConditionalFlow, FlowArch};
use crate::networks::Objective;
use crate::numcore::{Matrix, RngState, Tape, Var};

/// `−Σ log q(target | context)` over rows, as a scalar node.
pub fn nll_on_tape(tape: &Tape, flow: &BoundFlow, target: Var, context: Var) -> Result<Var> {
    let lp = flow.log_prob(tape, target, context)?;
    Ok(tape.neg(tape.sum(lp)))
}

fn mean_nll(flow: &ConditionalFlow, target: &Matrix, context: &Matrix) -> Result<f64> {
    if target.rows() == 0 {
        return Err(Error::arg("empty batch"));
    }
    let lp = flow.log_prob(target, context)?;
    let m = -lp.iter().sum::<f64>() / lp.len() as f64;
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::numeric("density loss"))
    }
}

/// Posterior-estimation loss `−mean log q(θ | z)`.
pub fn npe_loss(posterior: &ConditionalFlow, theta: &Matrix, z: &Matrix) -> Result<f64> {
    mean_nll(posterior, theta, z)
}

/// Likelihood-estimation loss `−mean log p(z | θ)`.
pub fn nle_loss(likelihood: &ConditionalFlow, theta: &Matrix, z: &Matrix) -> Result<f64> {
    mean_nll(likelihood, z, theta)
}

/// Tuning loss: each `z_sim` is replaced by one draw from the (frozen)
/// error model before scoring the posterior.
pub fn tuning_loss(
    posterior: &ConditionalFlow,
    theta: &Matrix,
    z_sim: &Matrix,
    error: &ErrorModel,
    rng: &mut RngState,
) -> Result<f64> {
    let z = error.corrupt(theta, z_sim, rng)?;
    npe_loss(posterior, theta, &z)
}

/// Noise applied to simulated summaries before they condition a posterior.
#[derive(Clone, Debug, PartialEq)]
pub enum Corruption {
    None,
    /// Each coordinate independently, with probability `prob`, gets
    /// `N(0, scale²)` added.
    SpikeSlab { prob: f64, scale: f64 },
    /// One draw from a learned error model per row.
    ErrorModel(Box<ErrorModel>),
}

/// Spike-and-slab corruption settings for the noisy-NPE baseline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpikeSlab {
    pub prob: f64,
    pub scale: f64,
}

impl Default for SpikeSlab {
    fn default() -> Self {
        Self { prob: 0.5, scale: 0.25 }
    }
}

impl Corruption {
    pub fn apply(&self, theta: &Matrix, x: &Matrix, rng: &mut RngState) -> Result<Matrix> {
        match self {
            Corruption::None => Ok(x.clone()),
            Corruption::SpikeSlab { prob, scale } => {
                let mut out = x.clone();
                for v in out.as_mut_slice() {
                    // draw both variates so the stream does not depend on prob
                    let hit = rng.uniform() < *prob;
                    let n = rng.normal();
                    if hit {
                        *v += scale * n;
                    }
                }
                Ok(out)
            }
            Corruption::ErrorModel(m) => m.corrupt(theta, x, rng),
        }
    }
}

/// Which side of the data the flow models.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DensityTarget {
    /// `q(θ | z)`.
    Posterior,
    /// `p(z | θ)`.
    Likelihood,
}

/// Flow maximum-likelihood objective over paired `(θ, z)` rows, with
/// optional corruption of `z` (NNPE and tuning).
pub struct DensityObjective {
    pub arch: FlowArch,
    pub theta: Matrix,
    pub z: Matrix,
    pub target: DensityTarget,
    pub corruption: Corruption,
}

impl DensityObjective {
    pub fn posterior(arch: FlowArch, theta: Matrix, z: Matrix, corruption: Corruption) -> Self {
        Self {
            arch,
            theta,
            z,
            target: DensityTarget::Posterior,
            corruption,
        }
    }

    pub fn likelihood(arch: FlowArch, theta: Matrix, z: Matrix) -> Self {
        Self {
            arch,
            theta,
            z,
            target: DensityTarget::Likelihood,
            corruption: Corruption::None,
        }
    }
}

impl Objective for DensityObjective {
    fn len(&self) -> usize {
        self.theta.rows()
    }

    fn chunk(&self, params: &[f64], idx: &[usize], rng: &mut RngState, with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let theta = self.theta.select_rows(idx);
        let z = self.corruption.apply(&theta, &self.z.select_rows(idx), rng)?;
        let tape = Tape::new();
        let p = param_row(&tape, params, with_grad);
        let flow = self.arch.bind_from(&tape, p, 0);
        let (target, context) = match self.target {
            DensityTarget::Posterior => (theta, z),
            DensityTarget::Likelihood => (z, theta),
        };
        let loss = nll_on_tape(&tape, &flow, tape.constant(target), tape.constant(context))?;
        finish(&tape, loss, p, with_grad)
    }
}

/// Registers a flat parameter vector as one `1×n` node.
pub(crate) fn param_row(tape: &Tape, params: &[f64], trainable: bool) -> Var {
    let m = Matrix::row_vector(params);
    if trainable {
        tape.param(m)
    } else {
        tape.constant(m)
    }
}

/// Reads the scalar loss and, if requested, the gradient of the flat
/// parameter node.
pub(crate) fn finish(tape: &Tape, loss: Var, p: Var, with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
    let value = tape.scalar(loss);
    if !with_grad {
        return Ok((value, None));
    }
    let grads = tape.backward(loss);
    let (_, n) = tape.shape(p);
    let g = grads.get_or_zeros(p, 1, n).into_vec();
    Ok((value, Some(g)))
}

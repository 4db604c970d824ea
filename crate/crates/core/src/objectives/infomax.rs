use serde::{Deserialize, Serialize};

use super::density::{finish, param_row};
use crate::error::{Error, Result};
use crate::networks::mlp::BoundMlp;
use crate::networks::{Discriminator, EncoderArch, Objective};
use crate::numcore::{Matrix, RngState, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InfoMaxConfig {
    pub shuffles: usize,
}

impl Default for InfoMaxConfig {
    fn default() -> Self {
        Self { shuffles: 4 }
    }
}

/// Shannon (Jensen–Shannon style) InfoMax loss for embeddings `z` paired
/// with parameters `θ`:
/// `−(mean[−softplus(−D(z, θ))] + mean_s mean[−softplus(D(z, θ_πs))])`
/// with `S` random row permutations `π_s`. A constant critic gives `2 ln 2`.
pub fn infomax_on_tape(
    tape: &Tape,
    z: Var,
    theta: &Matrix,
    critic: &BoundMlp,
    shuffles: usize,
    rng: &mut RngState,
) -> Result<Var> {
    let b = theta.rows();
    if b < 2 {
        return Err(Error::arg("InfoMax needs at least two pairs per batch"));
    }
    if shuffles == 0 {
        return Err(Error::arg("InfoMax needs at least one shuffle"));
    }
    let joint = critic.forward(tape, tape.concat_cols(z, tape.constant(theta.clone())));
    let j = tape.mean(tape.neg(tape.softplus(tape.neg(joint))));
    let mut marg: Option<Var> = None;
    for _ in 0..shuffles {
        let perm = rng.permutation(b);
        let shuffled = tape.constant(theta.select_rows(&perm));
        let d = critic.forward(tape, tape.concat_cols(z, shuffled));
        let term = tape.mean(tape.neg(tape.softplus(d)));
        marg = Some(match marg {
            Some(acc) => tape.add(acc, term),
            None => term,
        });
    }
    let m = tape.scale(marg.expect("at least one shuffle"), 1.0 / shuffles as f64);
    Ok(tape.neg(tape.add(j, m)))
}

/// InfoMax loss of an encoder/critic pair on raw series `x` and `θ`.
pub fn infomax_loss(
    encoder: &EncoderArch,
    critic: &Discriminator,
    params: &[f64],
    x: &Matrix,
    theta: &Matrix,
    shuffles: usize,
    rng: &mut RngState,
) -> Result<f64> {
    let tape = Tape::new();
    let p = param_row(&tape, params, false);
    let z = encoder.bind_from(&tape, p, 0).forward(&tape, tape.constant(x.clone()))?;
    let d = critic.mlp().bind_from(&tape, p, encoder.num_params());
    let l = infomax_on_tape(&tape, z, theta, &d, shuffles, rng)?;
    Ok(tape.scalar(l))
}

/// Neural-statistic pretraining: parameters are `[encoder | critic]`.
pub struct InfoMaxObjective {
    pub encoder: EncoderArch,
    pub critic: Discriminator,
    pub x: Matrix,
    pub theta: Matrix,
    pub shuffles: usize,
}

impl InfoMaxObjective {
    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.critic.num_params()
    }

    pub fn init(&self, rng: &mut RngState) -> Vec<f64> {
        let mut p = self.encoder.init(rng);
        p.extend(self.critic.mlp().init(rng, false));
        p
    }
}

impl Objective for InfoMaxObjective {
    fn len(&self) -> usize {
        self.x.rows()
    }

    fn chunk(&self, params: &[f64], idx: &[usize], rng: &mut RngState, with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let tape = Tape::new();
        let p = param_row(&tape, params, with_grad);
        let x = tape.constant(self.x.select_rows(idx));
        let z = self.encoder.bind_from(&tape, p, 0).forward(&tape, x)?;
        let critic = self.critic.mlp().bind_from(&tape, p, self.encoder.num_params());
        let l = infomax_on_tape(&tape, z, &self.theta.select_rows(idx), &critic, self.shuffles, rng)?;
        // the loop averages per-example sums
        let total = tape.scale(l, idx.len() as f64);
        finish(&tape, total, p, with_grad)
    }
}

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::density::{finish, param_row};
use super::space::ParamSpace;
use crate::error::{Error, Result};
use crate::errormodel::{ErrorArch, ErrorModel};
use crate::flows::{BoundFlow, ConditionalFlow, FlowArch};
use crate::networks::Objective;
use crate::numcore::{gaussian_logpdf_rows, Matrix, RngState, Tape, Var};

/// Optional log-prior over error covariances: receives the flattened
/// covariance rows (`r×n²`) and returns an `r×1` node.
pub type LogPriorXi = Arc<dyn Fn(&Tape, Var) -> Var + Send + Sync>;

#[derive(Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RvnpLossConfig {
    /// Importance samples per observation.
    pub k: usize,
    /// Likelihood draws per importance sample.
    pub m: usize,
    #[serde(skip)]
    pub log_prior_xi: Option<LogPriorXi>,
}

impl Default for RvnpLossConfig {
    fn default() -> Self {
        Self {
            k: 30,
            m: 8,
            log_prior_xi: None,
        }
    }
}

impl fmt::Debug for RvnpLossConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RvnpLossConfig")
            .field("k", &self.k)
            .field("m", &self.m)
            .field("log_prior_xi", &self.log_prior_xi.is_some())
            .finish()
    }
}

impl PartialEq for RvnpLossConfig {
    fn eq(&self, o: &Self) -> bool {
        self.k == o.k && self.m == o.m && self.log_prior_xi.is_none() && o.log_prior_xi.is_none()
    }
}

impl RvnpLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.m == 0 {
            return Err(Error::Config("K and M must be at least 1".into()));
        }
        Ok(())
    }
}

/// A frozen simulator surrogate that can be sampled by pushing given noise
/// through it, differentiably in `θ`.
pub trait LikelihoodSampler: Sync {
    fn obs_dim(&self) -> usize;

    /// `x = T(noise; θ)` for `θ` rows (`r×m`) and noise `r×obs_dim`.
    fn sample_on_tape(&self, tape: &Tape, theta: Var, noise: &Matrix) -> Result<Var>;
}

impl LikelihoodSampler for ConditionalFlow {
    fn obs_dim(&self) -> usize {
        self.event_dim()
    }

    fn sample_on_tape(&self, tape: &Tape, theta: Var, noise: &Matrix) -> Result<Var> {
        // constants: no gradient can reach the likelihood parameters
        let flow = self.bind(tape, false);
        let (x, _) = flow.forward(tape, tape.constant(noise.clone()), theta)?;
        Ok(x)
    }
}

/// Per-observation robust loss, `B×1`.
///
/// For each observation, `K` reparametrized draws `θ⁽ˡ⁾ ~ q(·|z)` are
/// weighted by
/// `log mean_m N(z; x⁽ˡᵐ⁾, ξ(θ⁽ˡ⁾)) + log p(θ⁽ˡ⁾) + log p(ξ) − log q(θ⁽ˡ⁾|z)`,
/// with `x⁽ˡᵐ⁾ ~ p(·|θ⁽ˡ⁾)` from the frozen likelihood, and the loss is
/// `−(logsumexp_l w⁽ˡ⁾ − ln K)`. Posterior noise is drawn first
/// (`B·K × m`), likelihood noise second (`B·K·M × n`).
#[allow(clippy::too_many_arguments)]
pub fn rvnp_loss_on_tape(
    tape: &Tape,
    posterior: &BoundFlow,
    likelihood: &dyn LikelihoodSampler,
    error: &ErrorArch,
    error_params: Var,
    error_offset: usize,
    z_obs: Var,
    space: &ParamSpace,
    cfg: &RvnpLossConfig,
    rng: &mut RngState,
) -> Result<Var> {
    cfg.validate()?;
    let (b, n) = tape.shape(z_obs);
    if b == 0 {
        return Err(Error::arg("empty observation batch"));
    }
    let (k, m) = (cfg.k, cfg.m);
    let dim = space.dim();
    let zk = tape.repeat_rows(z_obs, k);
    let u = tape.constant(rng.normal_matrix(b * k, dim));
    let (v, log_q) = posterior.sample(tape, u, zk)?;
    let theta = space.theta_on_tape(tape, v);

    let theta_m = tape.repeat_rows(theta, m);
    let noise = rng.normal_matrix(b * k * m, likelihood.obs_dim());
    let x_sim = likelihood.sample_on_tape(tape, theta_m, &noise)?;
    let cov = error.cov_on_tape(tape, error_params, error_offset, v);
    let cov_m = if tape.shape(cov).0 == 1 { cov } else { tape.repeat_rows(cov, m) };
    let zkm = tape.repeat_rows(zk, m);
    debug_assert_eq!(tape.shape(x_sim), (b * k * m, n));
    let log_lik = gaussian_logpdf_rows(tape, zkm, x_sim, cov_m)?;
    let inner = tape.affine(tape.group_logsumexp(log_lik, m), 1.0, -(m as f64).ln());

    let mut w = tape.add(inner, space.log_prior_on_tape(tape, v));
    if let Some(f) = &cfg.log_prior_xi {
        w = tape.add(w, f(tape, cov));
    }
    let w = tape.sub(w, log_q);
    let loss = tape.affine(tape.group_logsumexp(w, k), -1.0, (k as f64).ln());
    if let Some(i) = tape.value(loss).as_slice().iter().position(|v| *v == f64::INFINITY) {
        return Err(Error::DegenerateWeights { index: i });
    }
    Ok(loss)
}

/// Mean robust loss over a batch of (embedded, standardized) observations.
pub fn rvnp_loss(
    posterior: &ConditionalFlow,
    likelihood: &dyn LikelihoodSampler,
    error: &ErrorModel,
    z_obs: &Matrix,
    space: &ParamSpace,
    cfg: &RvnpLossConfig,
    rng: &mut RngState,
) -> Result<f64> {
    let tape = Tape::new();
    let post = posterior.bind(&tape, false);
    let ep = tape.constant(Matrix::row_vector(error.params()));
    let l = rvnp_loss_on_tape(
        &tape,
        &post,
        likelihood,
        error.arch(),
        ep,
        0,
        tape.constant(z_obs.clone()),
        space,
        cfg,
        rng,
    )?;
    let v = tape.value(l);
    Ok(v.as_slice().iter().sum::<f64>() / v.rows() as f64)
}

/// Joint training of posterior `φ` and error model `α`; parameters are laid
/// out `[φ | α]`. The likelihood is held fixed.
pub struct RvnpObjective<'a> {
    pub posterior: FlowArch,
    pub error: ErrorArch,
    pub likelihood: &'a dyn LikelihoodSampler,
    pub z_obs: Matrix,
    /// Posterior coordinates and the prior in them.
    pub space: ParamSpace,
    pub cfg: RvnpLossConfig,
}

impl RvnpObjective<'_> {
    pub fn split<'p>(&self, params: &'p [f64]) -> (&'p [f64], &'p [f64]) {
        params.split_at(self.posterior.num_params())
    }
}

impl Objective for RvnpObjective<'_> {
    fn len(&self) -> usize {
        self.z_obs.rows()
    }

    fn chunk(&self, params: &[f64], idx: &[usize], rng: &mut RngState, with_grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let tape = Tape::new();
        let p = param_row(&tape, params, with_grad);
        let post = self.posterior.bind_from(&tape, p, 0);
        let z = tape.constant(self.z_obs.select_rows(idx));
        let per_obs = rvnp_loss_on_tape(
            &tape,
            &post,
            self.likelihood,
            &self.error,
            p,
            self.posterior.num_params(),
            z,
            &self.space,
            &self.cfg,
            rng,
        )
        .map_err(|e| match e {
            Error::DegenerateWeights { index } => Error::DegenerateWeights { index: idx[index] },
            other => other,
        })?;
        finish(&tape, tape.sum(per_obs), p, with_grad)
    }
}

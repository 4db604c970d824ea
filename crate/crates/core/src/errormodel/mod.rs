//! Gaussian error models `p(x_obs | x_sim) = N(x_obs; x_sim, ξ(θ))`.
//!
//! Two variants share one interface: a θ-dependent diagonal network plus a
//! global low-rank term, and a single global Cholesky-parametrized
//! covariance. Both only ever inflate: every eigenvalue of `ξ(θ)` is at
//! least the variance floor.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::networks::{ErrorNet, GlobalCholesky};
use crate::numcore::{gaussian_logpdf, CholeskyFactor, Matrix, RngState, Tape, Var};

pub const ERROR_MODEL_KIND: &str = "error-model";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorModelKind {
    /// `Diag(softplus(MLP(θ)) + floor) + ΛΛᵀ`.
    DiagNetPlusGlobal,
    /// `LLᵀ + floor·I`, constant across parameter space.
    GlobalCholesky,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ErrorArch {
    DiagNetPlusGlobal(ErrorNet),
    GlobalCholesky(GlobalCholesky),
}

impl ErrorArch {
    pub fn new(kind: ErrorModelKind, theta_dim: usize, obs_dim: usize) -> Self {
        match kind {
            ErrorModelKind::DiagNetPlusGlobal => ErrorArch::DiagNetPlusGlobal(ErrorNet::new(theta_dim, obs_dim)),
            ErrorModelKind::GlobalCholesky => ErrorArch::GlobalCholesky(GlobalCholesky::new(obs_dim)),
        }
    }

    pub fn kind(&self) -> ErrorModelKind {
        match self {
            ErrorArch::DiagNetPlusGlobal(_) => ErrorModelKind::DiagNetPlusGlobal,
            ErrorArch::GlobalCholesky(_) => ErrorModelKind::GlobalCholesky,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            ErrorArch::DiagNetPlusGlobal(n) => n.obs_dim,
            ErrorArch::GlobalCholesky(g) => g.obs_dim,
        }
    }

    pub fn floor(&self) -> f64 {
        match self {
            ErrorArch::DiagNetPlusGlobal(n) => n.floor,
            ErrorArch::GlobalCholesky(g) => g.floor,
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            ErrorArch::DiagNetPlusGlobal(n) => n.num_params(),
            ErrorArch::GlobalCholesky(g) => g.num_params(),
        }
    }

    pub fn init(&self, rng: &mut RngState) -> Vec<f64> {
        match self {
            ErrorArch::DiagNetPlusGlobal(n) => n.init(rng),
            ErrorArch::GlobalCholesky(g) => g.init(),
        }
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        match self {
            ErrorArch::DiagNetPlusGlobal(n) => n.decay_mask(),
            ErrorArch::GlobalCholesky(g) => g.decay_mask(),
        }
    }

    /// Flattened covariances: `r×n²` for the network variant, `1×n²` (shared)
    /// for the global one.
    pub fn cov_on_tape(&self, tape: &Tape, flat: Var, offset: usize, theta: Var) -> Var {
        match self {
            ErrorArch::DiagNetPlusGlobal(n) => n.cov_on_tape(tape, flat, offset, theta),
            ErrorArch::GlobalCholesky(g) => g.cov_on_tape(tape, flat, offset),
        }
    }
}

/// An error model with its parameters `α`.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorModel {
    arch: ErrorArch,
    params: Vec<f64>,
}

impl ErrorModel {
    pub fn new(kind: ErrorModelKind, theta_dim: usize, obs_dim: usize, rng: &mut RngState) -> Self {
        let arch = ErrorArch::new(kind, theta_dim, obs_dim);
        let params = arch.init(rng);
        Self { arch, params }
    }

    pub fn from_params(arch: ErrorArch, params: Vec<f64>) -> Result<Self> {
        if params.len() != arch.num_params() {
            return Err(Error::arg(format!(
                "error model expects {} parameters, got {}",
                arch.num_params(),
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &ErrorArch {
        &self.arch
    }

    pub fn kind(&self) -> ErrorModelKind {
        self.arch.kind()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) {
        assert_eq!(params.len(), self.params.len(), "parameter count changed");
        self.params = params;
    }

    pub fn obs_dim(&self) -> usize {
        self.arch.obs_dim()
    }

    /// `ξ(θ)` as a Cholesky factor. `θ` is ignored by the global variant.
    pub fn error_cov(&self, theta: &[f64]) -> Result<CholeskyFactor> {
        match &self.arch {
            ErrorArch::DiagNetPlusGlobal(n) => n.error_cov(&self.params, theta),
            ErrorArch::GlobalCholesky(g) => g.error_cov(&self.params),
        }
    }

    /// Diagonal of `ξ(θ)`.
    pub fn variances(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let c = self.error_cov(theta)?.covariance();
        Ok((0..c.rows()).map(|k| c[(k, k)]).collect())
    }

    /// `log N(x_obs; x_sim, ξ(θ))`.
    pub fn log_error_density(&self, theta: &[f64], x_sim: &[f64], x_obs: &[f64]) -> Result<f64> {
        gaussian_logpdf(x_obs, x_sim, &self.error_cov(theta)?)
    }

    /// One draw `x_sim + L u`, `u ~ N(0, I)`.
    pub fn sample_error(&self, theta: &[f64], x_sim: &[f64], rng: &mut RngState) -> Result<Vec<f64>> {
        if x_sim.len() != self.obs_dim() {
            return Err(Error::arg("x_sim dimension does not match the error model"));
        }
        let f = self.error_cov(theta)?;
        let u: Vec<f64> = (0..x_sim.len()).map(|_| rng.normal()).collect();
        Ok(x_sim.iter().zip(f.mul_lower(&u)).map(|(a, b)| a + b).collect())
    }

    /// Corrupts every row of `x_sim` with one draw each.
    pub fn corrupt(&self, theta: &Matrix, x_sim: &Matrix, rng: &mut RngState) -> Result<Matrix> {
        let mut out = Matrix::zeros(x_sim.rows(), x_sim.cols());
        let shared = match self.kind() {
            ErrorModelKind::GlobalCholesky => Some(self.error_cov(&[])?),
            ErrorModelKind::DiagNetPlusGlobal => None,
        };
        for i in 0..x_sim.rows() {
            let owned;
            let f = match &shared {
                Some(f) => f,
                None => {
                    owned = self.error_cov(theta.row(i))?;
                    &owned
                }
            };
            let u: Vec<f64> = (0..x_sim.cols()).map(|_| rng.normal()).collect();
            for (o, (a, b)) in out.row_mut(i).iter_mut().zip(x_sim.row(i).iter().zip(f.mul_lower(&u))) {
                *o = a + b;
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            kind: ERROR_MODEL_KIND.into(),
            header: toml::to_string(&self.arch).expect("arch serializes"),
            params: self.params.clone(),
            optimizer: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        ck.expect_kind(ERROR_MODEL_KIND, path)?;
        let arch: ErrorArch = toml::from_str(&ck.header).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("error-model header: {e}"),
        })?;
        Self::from_params(arch, ck.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{softplus_inv, LN_2PI};

    fn unit_global(d: usize) -> ErrorModel {
        let arch = ErrorArch::new(ErrorModelKind::GlobalCholesky, 2, d);
        let mut p = vec![softplus_inv((1.0 - crate::networks::VARIANCE_FLOOR).sqrt()); d];
        p.extend(vec![0.0; d * (d - 1) / 2]);
        ErrorModel::from_params(arch, p).unwrap()
    }

    #[test]
    fn identity_error_density_at_mean() {
        let m = unit_global(3);
        let x = [0.2, -1.0, 3.0];
        let lp = m.log_error_density(&[0.0, 0.0], &x, &x).unwrap();
        assert!((lp + 1.5 * LN_2PI).abs() < 1e-10);
    }

    #[test]
    fn global_density_ignores_theta() {
        let mut rng = RngState::new(0);
        let mut m = ErrorModel::new(ErrorModelKind::GlobalCholesky, 2, 3, &mut rng);
        m.set_params(m.params().iter().map(|v| v + 0.5 * rng.normal()).collect());
        let a = m.log_error_density(&[0.1, 9.0], &[0.0, 1.0, 2.0], &[0.3, 0.7, 2.5]).unwrap();
        let b = m.log_error_density(&[-4.0, 2.0], &[0.0, 1.0, 2.0], &[0.3, 0.7, 2.5]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn draws_at_floor_stay_close() {
        let arch = ErrorArch::new(ErrorModelKind::GlobalCholesky, 1, 2);
        let m = ErrorModel::from_params(arch, vec![-60.0, -60.0, 0.0]).unwrap();
        let mut rng = RngState::new(3);
        let tol = 4.0 * crate::networks::VARIANCE_FLOOR.sqrt();
        for _ in 0..100 {
            let d = m.sample_error(&[0.0], &[1.0, -1.0], &mut rng).unwrap();
            assert!((d[0] - 1.0).abs() < tol && (d[1] + 1.0).abs() < tol);
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let m = ErrorModel::new(ErrorModelKind::DiagNetPlusGlobal, 2, 4, &mut RngState::new(1));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("err.ckpt");
        m.save(&path).unwrap();
        assert_eq!(ErrorModel::load(&path).unwrap(), m);
    }
}

use serde::{Deserialize, Serialize};

use super::mlp::{Activation, MlpSpec};
use crate::error::{Error, Result};
use crate::numcore::{
    cholesky, cov_diag_plus_lowrank, cov_from_cholesky, n_strict_lower, softplus_inv, CholeskyFactor, Matrix,
    RngState, Tape, Var,
};

/// Variance floor added to every error covariance.
pub const VARIANCE_FLOOR: f64 = 1e-6;

/// Softplus output that raw scale parameters start at.
pub const INIT_SCALE: f64 = 1e-3;

/// θ-dependent error covariance `Diag(softplus(MLP(θ)) + floor) + ΛΛᵀ`
/// with a globally learned, strictly lower-triangular `Λ`.
///
/// Parameter layout: the MLP blocks, then the packed entries of `Λ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorNet {
    pub theta_dim: usize,
    pub obs_dim: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub floor: f64,
}

impl ErrorNet {
    pub fn new(theta_dim: usize, obs_dim: usize) -> Self {
        Self {
            theta_dim,
            obs_dim,
            hidden: 52,
            hidden_layers: 2,
            floor: VARIANCE_FLOOR,
        }
    }

    pub fn mlp(&self) -> MlpSpec {
        let mut sizes = vec![self.theta_dim];
        sizes.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        sizes.push(self.obs_dim);
        MlpSpec::new(sizes, Activation::Relu)
    }

    pub fn num_params(&self) -> usize {
        self.mlp().num_params() + n_strict_lower(self.obs_dim)
    }

    /// Zero output weights and output bias `softplus⁻¹(1e-3)`: every θ starts
    /// with variance `1e-3 + floor`; `Λ = 0`.
    pub fn init(&self, rng: &mut RngState) -> Vec<f64> {
        let spec = self.mlp();
        let mut p = spec.init(rng, true);
        let n = p.len();
        p[n - self.obs_dim..].fill(softplus_inv(INIT_SCALE));
        p.extend(std::iter::repeat_n(0.0, n_strict_lower(self.obs_dim)));
        p
    }

    /// Network weights decay; `Λ` is a scale parameter and does not.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut m = vec![true; self.mlp().num_params()];
        m.extend(std::iter::repeat_n(false, n_strict_lower(self.obs_dim)));
        m
    }

    /// Flattened covariances `r×n²` for `θ` rows, parameters taken from the
    /// `1×P` node `flat` starting at `offset`.
    pub fn cov_on_tape(&self, tape: &Tape, flat: Var, offset: usize, theta: Var) -> Var {
        let spec = self.mlp();
        let net = spec.bind_from(tape, flat, offset);
        let off_start = offset + spec.num_params();
        let off = tape.slice_cols(flat, off_start, off_start + n_strict_lower(self.obs_dim));
        let raw = net.forward(tape, theta);
        let diag = tape.affine(tape.softplus(raw), 1.0, self.floor);
        cov_diag_plus_lowrank(tape, diag, off)
    }

    /// Covariance at one `θ`, factorized.
    pub fn error_cov(&self, params: &[f64], theta: &[f64]) -> Result<CholeskyFactor> {
        check_len(params, self.num_params())?;
        if theta.len() != self.theta_dim || theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::arg(format!("θ must be {} finite values", self.theta_dim)));
        }
        let tape = Tape::new();
        let flat = tape.constant(Matrix::row_vector(params));
        let th = tape.constant(Matrix::row_vector(theta));
        let c = self.cov_on_tape(&tape, flat, 0, th);
        let v = tape.value(c);
        factor(&v, self.obs_dim)
    }
}

/// θ-independent error covariance `Σ = LLᵀ + floor·I`, with `diag(L) =
/// softplus(raw)`.
///
/// Parameter layout: `n` raw diagonal entries, then the packed strictly
/// lower part of `L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalCholesky {
    pub obs_dim: usize,
    pub floor: f64,
}

impl GlobalCholesky {
    pub fn new(obs_dim: usize) -> Self {
        Self {
            obs_dim,
            floor: VARIANCE_FLOOR,
        }
    }

    pub fn num_params(&self) -> usize {
        self.obs_dim + n_strict_lower(self.obs_dim)
    }

    /// `L = 1e-3·I`.
    pub fn init(&self) -> Vec<f64> {
        let mut p = vec![softplus_inv(INIT_SCALE); self.obs_dim];
        p.extend(std::iter::repeat_n(0.0, n_strict_lower(self.obs_dim)));
        p
    }

    pub fn decay_mask(&self) -> Vec<bool> {
        vec![false; self.num_params()]
    }

    /// `1×n²` covariance from the `1×P` node `flat` at `offset`.
    pub fn cov_on_tape(&self, tape: &Tape, flat: Var, offset: usize) -> Var {
        let n = self.obs_dim;
        let raw = tape.slice_cols(flat, offset, offset + n);
        let off = tape.slice_cols(flat, offset + n, offset + self.num_params());
        let gram = cov_from_cholesky(tape, tape.softplus(raw), off);
        let floor = Matrix::identity(n).scale(self.floor);
        tape.add(gram, tape.constant(Matrix::from_vec(1, n * n, floor.into_vec())))
    }

    pub fn error_cov(&self, params: &[f64]) -> Result<CholeskyFactor> {
        check_len(params, self.num_params())?;
        let tape = Tape::new();
        let flat = tape.constant(Matrix::row_vector(params));
        let c = self.cov_on_tape(&tape, flat, 0);
        let v = tape.value(c);
        factor(&v, self.obs_dim)
    }
}

fn check_len(params: &[f64], n: usize) -> Result<()> {
    if params.len() != n {
        return Err(Error::arg(format!("expected {n} error-model parameters, got {}", params.len())));
    }
    Ok(())
}

fn factor(flat: &Matrix, d: usize) -> Result<CholeskyFactor> {
    let m = Matrix::from_vec(d, d, flat.row(0).to_vec());
    if !m.all_finite() {
        return Err(Error::numeric("error covariance"));
    }
    cholesky(&m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{gaussian_logpdf_rows, grad_check};

    fn with_output_bias(net: &ErrorNet, bias: f64) -> Vec<f64> {
        let mut p = net.init(&mut RngState::new(0));
        let n = net.mlp().num_params();
        p[n - net.obs_dim..n].fill(bias);
        p
    }

    #[test]
    fn large_negative_output_gives_floor() {
        let net = ErrorNet::new(2, 3);
        let p = with_output_bias(&net, -60.0);
        let s = net.error_cov(&p, &[0.3, 1.2]).unwrap().covariance();
        let diff = s.sub(&Matrix::identity(3).scale(VARIANCE_FLOOR));
        assert!(diff.frobenius_norm() < 1e-12);
    }

    #[test]
    fn unit_output_gives_identity() {
        let net = ErrorNet::new(2, 3);
        let p = with_output_bias(&net, softplus_inv(1.0));
        let s = net.error_cov(&p, &[-1.0, 4.0]).unwrap().covariance();
        assert!(s.sub(&Matrix::identity(3)).frobenius_norm() < 1e-5);
    }

    #[test]
    fn random_nets_stay_positive_definite() {
        let net = ErrorNet::new(3, 4);
        let mut rng = RngState::new(5);
        let p: Vec<f64> = net.init(&mut rng).iter().map(|v| v + rng.normal()).collect();
        for _ in 0..10_000 {
            let th: Vec<f64> = (0..3).map(|_| rng.uniform_range(-5.0, 5.0)).collect();
            let f = net.error_cov(&p, &th).unwrap();
            assert!((0..4).all(|k| f.lower()[(k, k)] > 0.0));
        }
    }

    #[test]
    fn global_init_is_diagonal_and_symmetric() {
        let g = GlobalCholesky::new(3);
        let f = g.error_cov(&g.init()).unwrap();
        let s = f.covariance();
        for i in 0..3 {
            for j in 0..3 {
                assert!((s[(i, j)] - s[(j, i)]).abs() < 1e-12);
                let want = if i == j { INIT_SCALE * INIT_SCALE + VARIANCE_FLOOR } else { 0.0 };
                assert!((s[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn global_factor_gradient_matches_differences() {
        let g = GlobalCholesky::new(3);
        let x = Matrix::from_rows(&[vec![0.3, -0.2, 0.5], vec![-0.1, 0.4, 0.0]]);
        let mu = Matrix::from_rows(&[vec![0.0, 0.1, 0.2], vec![0.2, 0.2, -0.3]]);
        let point = [0.4, -0.3, 0.8, 0.2, -0.5, 0.1];
        let err = grad_check(
            |t, p| {
                let cov = g.cov_on_tape(t, p, 0);
                let lp = gaussian_logpdf_rows(t, t.constant(x.clone()), t.constant(mu.clone()), cov)?;
                Ok(t.sum(lp))
            },
            &point,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}

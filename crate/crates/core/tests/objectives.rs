//! The robust importance-weighted loss against a model whose evidence is
//! known in closed form.

use rvnp::errormodel::{ErrorArch, ErrorModel, ErrorModelKind};
use rvnp::flows::{ConditionalFlow, FlowArch};
use rvnp::numcore::{Matrix, RngState, Tape, Var};
use rvnp::objectives::{rvnp_loss, LikelihoodSampler, ParamSpace, Prior, RvnpLossConfig};

const GAIN: f64 = 1.5;
const SIGMA: f64 = 0.4;

/// Exact simulator `x = GAIN·θ + SIGMA·ε`.
struct Linear;

impl LikelihoodSampler for Linear {
    fn obs_dim(&self) -> usize {
        1
    }

    fn sample_on_tape(&self, tape: &Tape, theta: Var, noise: &Matrix) -> rvnp::Result<Var> {
        Ok(tape.add(tape.scale(theta, GAIN), tape.constant(noise.scale(SIGMA))))
    }
}

/// Global error with ξ = 0.5² (plus the floor).
fn error_model() -> ErrorModel {
    let arch = ErrorArch::new(ErrorModelKind::GlobalCholesky, 1, 1);
    ErrorModel::from_params(arch, vec![(0.5f64.exp() - 1.0).ln()]).unwrap()
}

/// `−loss` over many independent replicates: `(mean, standard error)`.
fn bound(k: usize, m: usize, z: f64, seed: u64) -> (f64, f64) {
    let mut rng = RngState::new(seed);
    // a freshly initialised flow is the identity, so q(θ|z) is the prior
    let q = ConditionalFlow::new(FlowArch::new(1, 1), &mut rng).unwrap();
    let em = error_model();
    let space = ParamSpace::Direct {
        prior: Prior::standard_normal(1),
    };
    let cfg = RvnpLossConfig {
        k,
        m,
        log_prior_xi: None,
    };
    let reps: Vec<f64> = (0..40)
        .map(|_| -rvnp_loss(&q, &Linear, &em, &Matrix::filled(500, 1, z), &space, &cfg, &mut rng).unwrap())
        .collect();
    let mean = reps.iter().sum::<f64>() / reps.len() as f64;
    let var = reps.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (reps.len() - 1) as f64;
    (mean, (var / reps.len() as f64).sqrt())
}

fn log_evidence(z: f64) -> f64 {
    let em = error_model();
    let var = GAIN * GAIN + SIGMA * SIGMA + em.variances(&[0.0]).unwrap()[0];
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + z * z / var)
}

#[test]
fn bound_stays_below_the_evidence_and_tightens_with_k() {
    let z = 1.3;
    let exact = log_evidence(z);
    let mut last = f64::NEG_INFINITY;
    for k in [1, 4, 32] {
        let (b, se) = bound(k, 4, z, k as u64);
        assert!(b <= exact + 3.0 * se, "K = {k}: bound {b:.4} above log p(z) = {exact:.4}");
        assert!(b > last, "K = {k}: bound {b:.4} did not improve on {last:.4}");
        last = b;
    }
    assert!(exact - last < 0.1, "K = 32 leaves a gap of {:.4}", exact - last);
}

#[test]
fn more_likelihood_draws_tighten_the_bound() {
    let z = -0.7;
    let (few, _) = bound(4, 1, z, 21);
    let (many, se) = bound(4, 16, z, 22);
    assert!(many > few, "M = 16 gives {many:.4}, M = 1 gives {few:.4}");
    assert!(many <= log_evidence(z) + 3.0 * se);
}

//! The two Gaussian error models: covariances and corrupted simulations.
//!
//! `cargo run --release --example error_models`

use rvnp::errormodel::{ErrorModel, ErrorModelKind};
use rvnp::numcore::RngState;

fn main() -> rvnp::Result<()> {
    let mut rng = RngState::new(4);
    for kind in [ErrorModelKind::DiagNetPlusGlobal, ErrorModelKind::GlobalCholesky] {
        let mut em = ErrorModel::new(kind, 2, 3, &mut rng);
        // move away from the near-zero initialisation
        let p: Vec<f64> = em.params().iter().map(|v| v + 0.5 * rng.normal()).collect();
        em.set_params(p);
        println!("{kind:?} ({} parameters)", em.params().len());
        for theta in [[0.0, 0.0], [1.0, -1.0]] {
            let var = em.variances(&theta)?;
            let x_sim = [0.5, -0.2, 1.0];
            let x_obs = em.sample_error(&theta, &x_sim, &mut rng)?;
            let lp = em.log_error_density(&theta, &x_sim, &x_obs)?;
            println!("  θ = {theta:?}: diag ξ = {var:.3?}, x_obs = {x_obs:.3?}, log p = {lp:.3}");
        }
    }
    Ok(())
}

//! Fits a spline-flow posterior on the conjugate linear-Gaussian task and
//! compares it with the exact posterior.
//!
//! `cargo run --release --example npe_flow`

use rvnp::flows::{ConditionalFlow, FlowArch};
use rvnp::networks::{train_loop, AdamConfig, OptimizerState, TrainConfig};
use rvnp::numcore::{Matrix, RngState};
use rvnp::objectives::{Corruption, DensityObjective};
use rvnp::simulators::LinearGaussianConfig;

fn main() -> rvnp::Result<()> {
    let task = LinearGaussianConfig::default();
    let mut rng = RngState::new(1);
    let n = 5000;
    let theta = rng.normal_matrix(n, 1).scale(task.prior_std);
    let x: Vec<f64> = theta.iter_rows().flat_map(|t| task.simulate(t, &mut rng)).collect();
    let x = Matrix::from_vec(n, 1, x);

    let arch = FlowArch {
        hidden: 16,
        bins: 8,
        layers: 2,
        ..FlowArch::new(1, 1)
    };
    let obj = DensityObjective::posterior(arch.clone(), theta, x, Corruption::None);
    let init = ConditionalFlow::new(arch.clone(), &mut rng)?;
    let adam = AdamConfig {
        warmup_steps: 50,
        ..AdamConfig::default()
    };
    let mut opt = OptimizerState::new(arch.num_params(), adam);
    let cfg = TrainConfig {
        batch_size: 256,
        iterations: 60,
        ..TrainConfig::default()
    };
    let res = train_loop(&obj, init.params().to_vec(), &mut opt, &cfg, &mut rng)?;
    println!("trained {} epochs, best validation loss {:.4}", res.history.len(), res.best_validation);
    let flow = ConditionalFlow::from_params(arch, res.params)?;

    for xo in [-1.5, 0.0, 2.0] {
        let (s, _) = flow.sample(&[xo], 5000, &mut rng)?;
        let v = s.as_slice();
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|t| (t - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
        let (em, es) = task.posterior(&[xo])[0];
        println!("x = {xo:+.1}: flow N({m:+.3}, {sd:.3}²)  exact N({em:+.3}, {es:.3}²)");
    }
    Ok(())
}

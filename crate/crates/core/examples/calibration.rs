//! Coverage, LPP and NMSE of the exact linear-Gaussian posterior against an
//! overconfident and an underconfident one.
//!
//! `cargo run --release --example calibration`

use rvnp::metrics::{GaussianPosterior, MetricReport};
use rvnp::numcore::{Matrix, RngState};
use rvnp::simulators::LinearGaussianConfig;

fn main() -> rvnp::Result<()> {
    let task = LinearGaussianConfig::default();
    let mut rng = RngState::new(2);
    let n = 400;
    let theta = rng.normal_matrix(n, 1).scale(task.prior_std);
    let x: Vec<f64> = theta.iter_rows().flat_map(|t| task.simulate(t, &mut rng)).collect();
    let x = Matrix::from_vec(n, 1, x);
    let widths = [4.0 * task.prior_std];

    for (label, stretch) in [("exact", 1.0), ("overconfident", 0.5), ("underconfident", 2.0)] {
        let post = GaussianPosterior::new(1, |xo: &[f64]| {
            task.posterior(xo).into_iter().map(|(m, s)| (m, s * stretch)).collect()
        });
        let r = MetricReport::compute(&post, &theta, &x, &widths, 500, &rng.split_named(label))?;
        println!("{label:>15}: α = {:+.4}  LPP = {:.4}  NMSE = {:.4}", r.alpha(), r.lpp, r.nmse.mean);
    }
    Ok(())
}

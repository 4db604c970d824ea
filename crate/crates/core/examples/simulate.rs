//! Draws a few parameter/observation pairs from every task.
//!
//! `cargo run --release --example simulate`

use rvnp::numcore::RngState;
use rvnp::simulators::TaskConfig;

fn main() -> rvnp::Result<()> {
    let mut rng = RngState::new(0);
    for name in ["linear-gaussian", "cs", "sir", "pendulum"] {
        let task = TaskConfig::named(name)?;
        let prior = task.prior()?;
        println!("{name}: θ ∈ R^{}, x ∈ R^{}", task.theta_dim(), task.data_dim());
        for _ in 0..2 {
            let theta = prior.sample(&mut rng);
            match task.simulate(&theta, &mut rng) {
                Some(x) => {
                    let head: Vec<String> = x.iter().take(6).map(|v| format!("{v:.3}")).collect();
                    println!("  θ = {theta:.3?} -> x[..6] = [{}]", head.join(", "));
                }
                None => println!("  θ = {theta:.3?} -> rejected"),
            }
        }
    }
    Ok(())
}

//! Differentiable training losses: posterior and likelihood estimation,
//! the importance-weighted robust loss, posterior tuning, and InfoMax.

mod density;
mod infomax;
mod prior;
mod rvnp;
mod space;

pub use density::{
    nle_loss, nll_on_tape, npe_loss, tuning_loss, Corruption, DensityObjective, DensityTarget, SpikeSlab,
};
pub use infomax::{infomax_loss, infomax_on_tape, InfoMaxConfig, InfoMaxObjective};
pub use prior::Prior;
pub use space::ParamSpace;
pub use rvnp::{rvnp_loss, rvnp_loss_on_tape, LikelihoodSampler, LogPriorXi, RvnpLossConfig, RvnpObjective};

#[cfg(test)]
mod tests;

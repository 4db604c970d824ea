//! Feed-forward building blocks, error-model networks, the series encoder,
//! and the optimizer and training loop shared by every stage.

pub mod adam;
pub mod encoder;
pub mod errornet;
pub mod mlp;
pub mod train;

pub use adam::{AdamConfig, OptimizerState};
pub use encoder::{Discriminator, EncoderArch};
pub use errornet::{ErrorNet, GlobalCholesky, VARIANCE_FLOOR};
pub use mlp::{Activation, MlpSpec};
pub use train::{
    evaluate_mean, split_indices, train_loop, train_loop_with_split, EpochRecord, Objective, StopReason, TrainConfig,
    TrainOutcome,
};

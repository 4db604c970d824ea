//! Dense matrices, stable special functions, Cholesky factorization,
//! seeded random streams and the reverse-mode tape every trainable module
//! builds on.

mod gaussian;
mod gradcheck;
mod linalg;
mod matrix;
mod parallel;
mod rng;
pub mod special;
mod tape;

pub use gaussian::{
    cov_diag_plus_lowrank, cov_from_cholesky, cov_row, gaussian_logpdf_rows, n_strict_lower,
    strict_lower_indices,
};
pub use gradcheck::grad_check;
pub use linalg::{cholesky, gaussian_logpdf, CholeskyFactor, CHOLESKY_JITTER};
pub use matrix::{gemm, Matrix};
pub use parallel::{par_map, worker_count};
pub use rng::RngState;
pub use special::{logsumexp, softplus, softplus_inv, LN_2PI};
pub use tape::{pool_window, CustomOp, Gradients, Tape, Unary, Var};

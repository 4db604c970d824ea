//! Robust simulation-based inference: neural likelihood and posterior
//! flows, a learned Gaussian error model that absorbs the gap between
//! simulator and observations, and calibration diagnostics.
//!
//! The crate is organized bottom-up:
//!
//! * [`numcore`] — matrices, special functions, Cholesky, RNG streams and a
//!   small reverse-mode tape;
//! * [`flows`] — conditional rational-quadratic spline flows;
//! * [`networks`] — MLPs, error networks, encoders, Adam and the training
//!   loop;
//! * [`objectives`] — NPE, NLE, the importance-weighted robust loss, the
//!   tuning loss and InfoMax;
//! * [`errormodel`] — the two Gaussian error-model variants;
//! * [`simulators`] — the CS, SIR and pendulum tasks;
//! * [`metrics`] — LPP, coverage curves, calibration α and NMSE;
//! * [`pipeline`] — configs, staged runs, sweeps and reports.

// `!(x > 0.0)` is deliberate: it also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod binio;
pub mod checkpoint;
pub mod error;
pub mod errormodel;
pub mod flows;
pub mod metrics;
pub mod networks;
pub mod numcore;
pub mod objectives;
pub mod pipeline;
pub mod simulators;

pub use error::{Error, Result};

//! End-to-end runs: config, datasets, summary statistics, the baseline and
//! robust posteriors, evaluation, and sweeps over observation counts.

pub mod config;
pub mod manifest;
pub mod run;
pub mod standardize;
pub mod sweep;

pub use config::{Method, RunConfig, StageFlags, CONFIG_VERSION};
pub use manifest::{RunManifest, StageRecord};
pub use run::{nmse_widths, run_pipeline, PipelineOutcome, RunPaths, Stage, Summarizer, Target};
pub use standardize::{ScaledPosterior, Standardizer};
pub use sweep::{aggregate, report, run_sweep, CellResult, Stat, SummaryRow};

//! Conditional normalizing flows from rational-quadratic spline coupling
//! layers. One architecture serves both as the likelihood surrogate
//! `p(x | θ)` and as the amortized posterior `p(θ | x)`.

mod flow;
pub mod spline;

use std::path::Path;

pub use flow::{base_logpdf, BoundFlow, ConditionalFlow, FlowArch};

use crate::checkpoint::{Checkpoint, OptimizerSnapshot};
use crate::error::{Error, Result};

pub const FLOW_KIND: &str = "flow";

impl ConditionalFlow {
    pub fn to_checkpoint(&self, optimizer: Option<OptimizerSnapshot>) -> Checkpoint {
        Checkpoint {
            kind: FLOW_KIND.into(),
            header: toml::to_string(self.arch()).expect("arch serializes"),
            params: self.params().to_vec(),
            optimizer,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        ck.expect_kind(FLOW_KIND, path)?;
        let arch: FlowArch = toml::from_str(&ck.header).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("flow header: {e}"),
        })?;
        ConditionalFlow::from_params(arch, ck.params.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(None).save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

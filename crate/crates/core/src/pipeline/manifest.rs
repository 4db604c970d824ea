//! Per-directory record of completed stages, used to resume runs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    /// Digest of everything the stage's outputs depend on.
    pub hash: String,
    pub completed: bool,
    pub seconds: f64,
    /// Files read, relative to the run root where possible.
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Hash of the config that last wrote to this directory.
    pub config_hash: String,
    #[serde(default)]
    pub stages: BTreeMap<String, StageRecord>,
}

impl RunManifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    /// The manifest in `dir`, or an empty one if there is none yet.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = Self::path(dir);
        if !path.exists() {
            return Ok(Self::default());
        }
        toml::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::Format {
            path,
            reason: e.to_string(),
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let text = toml::to_string(self).expect("manifest serializes");
        // write-then-rename so an interrupted run never leaves half a file
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, text)?;
        fs::rename(tmp, Self::path(dir))?;
        Ok(())
    }

    /// True if `stage` completed with `hash` and all its outputs still exist.
    pub fn is_current(&self, stage: &str, hash: &str, dir: &Path) -> bool {
        self.stages.get(stage).is_some_and(|r| {
            r.completed && r.hash == hash && r.outputs.iter().all(|o| dir.join(o).exists())
        })
    }

    /// Reads, updates one stage, and writes back, so that stages sharing a
    /// directory never overwrite each other's records.
    pub fn record(dir: &Path, config_hash: &str, stage: &str, rec: StageRecord) -> Result<()> {
        let mut m = Self::load(dir)?;
        m.config_hash = config_hash.to_string();
        m.stages.insert(stage.to_string(), rec);
        m.save(dir)
    }

    pub fn clear(dir: &Path) -> Result<()> {
        let p = Self::path(dir);
        if p.exists() {
            fs::remove_file(p)?;
        }
        Ok(())
    }
}

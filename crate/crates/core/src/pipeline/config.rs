//! Run configuration, read from TOML.
//!
//! Every section is optional and falls back to the defaults below; unknown
//! keys are rejected so typos do not silently change a run. `version` must
//! equal [`CONFIG_VERSION`].

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::errormodel::ErrorModelKind;
use crate::flows::FlowArch;
use crate::networks::{AdamConfig, EncoderArch, TrainConfig};
use crate::objectives::SpikeSlab;
use crate::simulators::{PendulumConfig, TaskConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Npe,
    Nnpe,
    Rvnp,
    RvnpGlobal,
    RvnpT,
    RvnpGlobalT,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Npe,
        Method::Nnpe,
        Method::Rvnp,
        Method::RvnpGlobal,
        Method::RvnpT,
        Method::RvnpGlobalT,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            Method::Npe => "npe",
            Method::Nnpe => "nnpe",
            Method::Rvnp => "rvnp",
            Method::RvnpGlobal => "rvnp-global",
            Method::RvnpT => "rvnp-t",
            Method::RvnpGlobalT => "rvnp-global-t",
        }
    }

    /// Error model of the variational stage, if the method has one.
    pub fn error_model(self) -> Option<ErrorModelKind> {
        match self {
            Method::Npe | Method::Nnpe => None,
            Method::Rvnp | Method::RvnpT => Some(ErrorModelKind::DiagNetPlusGlobal),
            Method::RvnpGlobal | Method::RvnpGlobalT => Some(ErrorModelKind::GlobalCholesky),
        }
    }

    pub fn stages(self) -> StageFlags {
        let robust = self.error_model().is_some();
        StageFlags {
            train_flow: robust,
            train_variational: robust,
            tune_posterior: matches!(self, Method::RvnpT | Method::RvnpGlobalT),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.slug().to_uppercase())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.slug() == key)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

/// Which optional stages run: the likelihood flow, the variational stage
/// and posterior tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub train_flow: bool,
    pub train_variational: bool,
    pub tune_posterior: bool,
}

/// Explicit stage flags in a config; each must agree with the method.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageOverrides {
    pub train_flow: Option<bool>,
    pub train_variational: Option<bool>,
    pub tune_posterior: Option<bool>,
}

/// Spline-flow architecture shared by the likelihood and posterior flows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    pub layers: usize,
    pub bins: usize,
    pub tail_bound: f64,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl Default for FlowConfig {
    fn default() -> Self {
        let a = FlowArch::new(1, 1);
        Self {
            layers: a.layers,
            bins: a.bins,
            tail_bound: a.tail_bound,
            hidden: a.hidden,
            hidden_layers: a.hidden_layers,
        }
    }
}

impl FlowConfig {
    pub fn arch(&self, event_dim: usize, context_dim: usize) -> FlowArch {
        FlowArch {
            event_dim,
            context_dim,
            layers: self.layers,
            bins: self.bins,
            tail_bound: self.tail_bound,
            hidden: self.hidden,
            hidden_layers: self.hidden_layers,
        }
    }
}

/// Optimizer plus loop settings of one training stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageTraining {
    pub adam: AdamConfig,
    pub train: TrainConfig,
}

/// Neural summary statistic for raw-series tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pooled: usize,
    pub hidden: usize,
    pub shuffles: usize,
    pub adam: AdamConfig,
    pub train: TrainConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let a = EncoderArch::new(200, 4);
        Self {
            embed_dim: a.embed_dim,
            channels: a.channels,
            kernel: a.kernel,
            stride: a.stride,
            pooled: a.pooled,
            hidden: a.hidden,
            shuffles: 4,
            adam: AdamConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl EncoderConfig {
    pub fn arch(&self, input_len: usize) -> EncoderArch {
        EncoderArch {
            input_len,
            channels: self.channels,
            kernel: self.kernel,
            stride: self.stride,
            pooled: self.pooled,
            hidden: self.hidden,
            embed_dim: self.embed_dim,
        }
    }
}

/// The variational stage: posterior and error model trained jointly on
/// the observations. `train.importance_samples` is `K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VariationalConfig {
    /// Likelihood draws per importance sample (`M`).
    pub inner_samples: usize,
    /// Start the posterior from the trained NPE posterior.
    pub warm_start: bool,
    pub posterior_adam: AdamConfig,
    pub error_adam: AdamConfig,
    /// Missing keys fall back to this stage's defaults (batch 256), not the
    /// generic ones.
    #[serde(deserialize_with = "variational_train")]
    pub train: TrainConfig,
}

fn variational_train<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<TrainConfig, D::Error> {
    let partial = toml::Table::deserialize(d)?;
    let mut base = toml::Table::try_from(VariationalConfig::default().train).map_err(D::Error::custom)?;
    base.extend(partial);
    base.try_into().map_err(D::Error::custom)
}

impl Default for VariationalConfig {
    fn default() -> Self {
        Self {
            inner_samples: 8,
            warm_start: true,
            posterior_adam: AdamConfig::default(),
            error_adam: AdamConfig::default(),
            train: TrainConfig {
                batch_size: 256,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Posterior draws per test point for coverage and NMSE.
    pub samples: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            samples: crate::metrics::DEFAULT_SAMPLES,
        }
    }
}

/// The grid run by `sweep`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub n_obs: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            n_obs: vec![1, 10, 100, 1000, 10000],
            methods: vec![Method::Npe, Method::Nnpe, Method::Rvnp, Method::RvnpT],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub method: Method,
    pub seed: u64,
    pub n_sim: usize,
    pub n_obs: usize,
    pub n_test: usize,
    /// Output directory; the `--out` flag takes precedence.
    pub out: Option<PathBuf>,
    /// Also write CSV copies of the datasets.
    pub export_csv: bool,
    pub stages: StageOverrides,
    pub task: TaskConfig,
    pub flow: FlowConfig,
    pub encoder: EncoderConfig,
    pub npe: StageTraining,
    pub nle: StageTraining,
    pub nnpe: SpikeSlab,
    pub variational: VariationalConfig,
    pub tuning: StageTraining,
    pub evaluation: EvaluationConfig,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            method: Method::RvnpT,
            seed: 0,
            n_sim: 100_000,
            n_obs: 1000,
            n_test: 500,
            out: None,
            export_csv: true,
            stages: StageOverrides::default(),
            task: TaskConfig::Pendulum(PendulumConfig::default()),
            flow: FlowConfig::default(),
            encoder: EncoderConfig::default(),
            npe: StageTraining::default(),
            nle: StageTraining::default(),
            nnpe: SpikeSlab::default(),
            variational: VariationalConfig::default(),
            tuning: StageTraining::default(),
            evaluation: EvaluationConfig::default(),
            sweep: SweepConfig::default(),
        }
    }
}

fn positive_lr(name: &str, a: &AdamConfig) -> Result<()> {
    if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.clip_norm > 0.0) {
        return Err(Error::Config(format!("{name}: invalid optimizer settings {a:?}")));
    }
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.n_sim < 2 || self.n_obs == 0 || self.n_test == 0 {
            return Err(Error::Config("need n_sim ≥ 2, n_obs ≥ 1 and n_test ≥ 1".into()));
        }
        self.task.validate()?;
        let flags = self.method.stages();
        let s = &self.stages;
        for (name, set, want) in [
            ("train_flow", s.train_flow, flags.train_flow),
            ("train_variational", s.train_variational, flags.train_variational),
            ("tune_posterior", s.tune_posterior, flags.tune_posterior),
        ] {
            if set.is_some_and(|v| v != want) {
                return Err(Error::Config(format!(
                    "stage flag {name} = {} contradicts method {}",
                    !want, self.method
                )));
            }
        }
        for (name, st) in [("npe", &self.npe), ("nle", &self.nle), ("tuning", &self.tuning)] {
            st.train.validate()?;
            positive_lr(name, &st.adam)?;
        }
        self.variational.train.validate()?;
        positive_lr("variational.posterior_adam", &self.variational.posterior_adam)?;
        positive_lr("variational.error_adam", &self.variational.error_adam)?;
        if self.variational.inner_samples == 0 {
            return Err(Error::Config("variational.inner_samples must be positive".into()));
        }
        if self.task.needs_encoder() {
            self.encoder.train.validate()?;
            positive_lr("encoder", &self.encoder.adam)?;
            self.encoder.arch(self.task.data_dim()).validate()?;
            if self.encoder.shuffles == 0 || self.encoder.embed_dim == 0 {
                return Err(Error::Config("encoder needs shuffles ≥ 1 and embed_dim ≥ 1".into()));
            }
        }
        if self.flow.bins < 2 || self.flow.layers == 0 || !(self.flow.tail_bound > 0.0) {
            return Err(Error::Config("invalid flow architecture".into()));
        }
        if !(0.0..=1.0).contains(&self.nnpe.prob) || self.nnpe.scale < 0.0 {
            return Err(Error::Config("invalid NNPE corruption".into()));
        }
        if self.evaluation.samples < 100 {
            return Err(Error::Config("evaluation needs at least 100 posterior samples".into()));
        }
        Ok(())
    }

    /// Short digest of the canonical TOML form, ignoring `out`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        digest(&c.to_toml())
    }
}

/// First 16 hex digits of SHA-256.
pub fn digest(text: &str) -> String {
    Sha256::digest(text.as_bytes())[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

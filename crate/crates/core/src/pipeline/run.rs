//! Staged execution of a single run.
//!
//! Stages that depend only on the simulation budget (datasets, summaries,
//! NPE, NNPE, the likelihood flow) live in a *shared* directory so that a
//! sweep can reuse them across methods and observation counts; the rest
//! live in the *run* directory. For a single run both are the same.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;
use std::time::Instant;

use super::config::{digest, Method, RunConfig};
use super::manifest::{RunManifest, StageRecord};
use super::standardize::{ScaledPosterior, SpacePosterior, Standardizer};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::errormodel::{ErrorArch, ErrorModel};
use crate::flows::ConditionalFlow;
use crate::metrics::MetricReport;
use crate::networks::{
    split_indices, train_loop_with_split, Discriminator, EncoderArch, EpochRecord, Objective, OptimizerState,
    TrainConfig, TrainOutcome,
};
use crate::numcore::{par_map, Matrix, RngState};
use crate::objectives::{
    Corruption, DensityObjective, InfoMaxObjective, ParamSpace, Prior, RvnpLossConfig, RvnpObjective,
};
use crate::simulators::{draw, DataFile, SetKind};

pub const ENCODER_KIND: &str = "encoder";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Stage {
    /// Simulation corpus and labelled test set.
    Simulate,
    /// Standardization and, for raw series, the InfoMax encoder.
    Summaries,
    Npe,
    Nnpe,
    /// Likelihood flow.
    Likelihood,
    Observations,
    /// Joint posterior / error-model training.
    Variational,
    Tune,
    Evaluate,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Simulate => "simulate",
            Stage::Summaries => "summaries",
            Stage::Npe => "npe",
            Stage::Nnpe => "nnpe",
            Stage::Likelihood => "likelihood",
            Stage::Observations => "observations",
            Stage::Variational => "variational",
            Stage::Tune => "tune",
            Stage::Evaluate => "evaluate",
        }
    }

    fn shared(self, method: Method) -> bool {
        match self {
            Stage::Observations | Stage::Variational | Stage::Tune => false,
            Stage::Evaluate => method.error_model().is_none(),
            _ => true,
        }
    }
}

/// Where a run writes. `shared` may equal `run`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPaths {
    pub shared: PathBuf,
    pub run: PathBuf,
}

impl RunPaths {
    pub fn single(out: &Path) -> Self {
        Self {
            shared: out.to_path_buf(),
            run: out.to_path_buf(),
        }
    }
}

/// What a pipeline invocation did.
#[derive(Clone, Debug)]
pub struct PipelineOutcome {
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
    /// Directory holding `metrics.csv`, once evaluation has run.
    pub metrics_dir: Option<PathBuf>,
}

/// Summaries in model space: raw standardization, optional encoder, and a
/// final standardization of the embedding.
pub struct Summarizer {
    pub raw: Standardizer,
    pub encoder: Option<(EncoderArch, Vec<f64>)>,
    pub embedded: Option<Standardizer>,
}

const EMBED_ROWS: usize = 512;

/// Embeds in fixed row blocks, in parallel; results do not depend on the
/// worker count.
pub fn embed_rows(arch: &EncoderArch, params: &[f64], x: &Matrix) -> Result<Matrix> {
    let blocks: Vec<Vec<usize>> = (0..x.rows())
        .collect::<Vec<_>>()
        .chunks(EMBED_ROWS)
        .map(<[usize]>::to_vec)
        .collect();
    let parts = par_map(blocks.len(), |b| arch.embed(params, &x.select_rows(&blocks[b])));
    let mut data = Vec::with_capacity(x.rows() * arch.embed_dim);
    for p in parts {
        data.extend(p?.into_vec());
    }
    Ok(Matrix::from_vec(x.rows(), arch.embed_dim, data))
}

impl Summarizer {
    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let s = self.raw.apply(x)?;
        match (&self.encoder, &self.embedded) {
            (Some((arch, p)), Some(out)) => out.apply(&embed_rows(arch, p, &s)?),
            _ => Ok(s),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.embedded.as_ref().unwrap_or(&self.raw).output_dim()
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let raw = Standardizer::load(&dir.join(RAW_STD))?;
        let enc_path = dir.join(ENCODER_FILE);
        if !enc_path.exists() {
            return Ok(Self {
                raw,
                encoder: None,
                embedded: None,
            });
        }
        let ck = Checkpoint::load(&enc_path)?;
        ck.expect_kind(ENCODER_KIND, &enc_path)?;
        let arch: EncoderArch = toml::from_str(&ck.header).map_err(|e| Error::Format {
            path: enc_path.clone(),
            reason: e.to_string(),
        })?;
        Ok(Self {
            raw,
            encoder: Some((arch, ck.params)),
            embedded: Some(Standardizer::load(&dir.join(EMBED_STD))?),
        })
    }
}

const SIM_FILE: &str = "data/simulations.bin";
const TEST_FILE: &str = "data/test.bin";
const OBS_FILE: &str = "data/observations.bin";
const OBS_LABEL_FILE: &str = "data/observation-labels.bin";
const Z_SIM_FILE: &str = "data/z-simulations.bin";
const Z_TEST_FILE: &str = "data/z-test.bin";
const RAW_STD: &str = "summaries-raw.std";
const EMBED_STD: &str = "summaries-embedded.std";
const ENCODER_FILE: &str = "encoder.ckpt";
const NPE_FILE: &str = "npe.ckpt";
const NNPE_FILE: &str = "nnpe.ckpt";
const LIKELIHOOD_FILE: &str = "likelihood.ckpt";
const POSTERIOR_FILE: &str = "rvnp-posterior.ckpt";
const ERROR_FILE: &str = "error-model.ckpt";
const TUNED_FILE: &str = "tuned-posterior.ckpt";

fn history_csv(h: &[EpochRecord]) -> String {
    let mut s = String::from("epoch,train_loss,validation_loss\n");
    for r in h {
        s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.validation_loss));
    }
    s
}

/// Simulated pairs in model space.
struct ModelData {
    /// Standardized θ, the likelihood context.
    theta: Matrix,
    /// θ in posterior coordinates, the posterior target.
    v: Matrix,
    z: Matrix,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    paths: &'a RunPaths,
    master: RngState,
    config_hash: String,
    hashes: HashMap<Stage, String>,
    executed: Vec<Stage>,
    skipped: Vec<Stage>,
    split: Option<Rc<(Vec<usize>, Vec<usize>)>>,
    model_sims: Option<Rc<ModelData>>,
}

type Outputs = Vec<String>;

impl<'a> Ctx<'a> {
    fn dir(&self, stage: Stage) -> &Path {
        if stage.shared(self.cfg.method) {
            &self.paths.shared
        } else {
            &self.paths.run
        }
    }

    /// Runs `body` unless the manifest says `stage` is current for `hash`.
    fn stage(
        &mut self,
        stage: Stage,
        key: String,
        inputs: Vec<String>,
        body: impl FnOnce(&mut Self, &Path) -> Result<Outputs>,
    ) -> Result<String> {
        let hash = digest(&format!("{}|{key}", stage.name()));
        let dir = self.dir(stage).to_path_buf();
        fs::create_dir_all(dir.join("data"))?;
        let inputs: Vec<String> = inputs
            .into_iter()
            .map(|i| match Path::new(&i).strip_prefix(&dir) {
                Ok(rel) => rel.display().to_string(),
                Err(_) => i,
            })
            .collect();
        if RunManifest::load(&dir)?.is_current(stage.name(), &hash, &dir) {
            log::info!("{}: up to date, skipping", stage.name());
            self.skipped.push(stage);
            self.hashes.insert(stage, hash.clone());
            return Ok(hash);
        }
        log::info!("{}: running", stage.name());
        let start = Instant::now();
        let result = body(self, &dir);
        let seconds = start.elapsed().as_secs_f64();
        let rec = match &result {
            Ok(outputs) => StageRecord {
                hash: hash.clone(),
                completed: true,
                seconds,
                inputs,
                outputs: outputs.clone(),
                error: None,
            },
            Err(e) => StageRecord {
                hash: hash.clone(),
                completed: false,
                seconds,
                inputs,
                outputs: vec![],
                error: Some(e.to_string()),
            },
        };
        RunManifest::record(&dir, &self.config_hash, stage.name(), rec)?;
        result?;
        log::info!("{}: done in {seconds:.1} s", stage.name());
        self.executed.push(stage);
        self.hashes.insert(stage, hash.clone());
        Ok(hash)
    }

    fn rng(&self, stage: Stage) -> RngState {
        self.master.split_named(stage.name())
    }

    fn prior(&self) -> Result<Prior> {
        self.cfg.task.prior()
    }

    fn theta_scaler(&self) -> Result<Standardizer> {
        let p = self.prior()?;
        Standardizer::affine(p.mean(), p.std())
    }

    fn model_prior(&self) -> Result<Prior> {
        let p = self.prior()?;
        Ok(p.affine_image(&p.mean(), &p.std()))
    }

    /// Coordinates of every posterior flow.
    fn space(&self) -> Result<ParamSpace> {
        Ok(ParamSpace::for_prior(&self.model_prior()?))
    }

    /// Training/validation rows of the simulation corpus, shared by every
    /// stage that trains on it.
    fn split(&mut self) -> Rc<(Vec<usize>, Vec<usize>)> {
        if self.split.is_none() {
            let mut r = self.master.split_named("split");
            let s = split_indices(self.cfg.n_sim, self.cfg.npe.train.validation_fraction, &mut r);
            self.split = Some(Rc::new(s));
        }
        self.split.clone().expect("split set")
    }

    // ---- stages -------------------------------------------------------

    fn simulate(&mut self) -> Result<String> {
        if let Some(h) = self.hashes.get(&Stage::Simulate) {
            return Ok(h.clone());
        }
        let c = self.cfg;
        let key = format!("{:?}|{}|{}|{}", c.task, c.n_sim, c.n_test, c.seed);
        self.stage(Stage::Simulate, key, vec![], |ctx, dir| {
            let task = &ctx.cfg.task;
            let mut out = vec![];
            for (kind, n, file) in [
                (SetKind::Simulations, ctx.cfg.n_sim, SIM_FILE),
                (SetKind::Test, ctx.cfg.n_test, TEST_FILE),
            ] {
                let set = draw(task, kind, n, &ctx.master)?;
                let f = DataFile::new(task, kind.name(), ctx.cfg.seed, vec![("theta".into(), set.theta), ("x".into(), set.x)]);
                f.save(&dir.join(file))?;
                out.push(file.to_string());
                if ctx.cfg.export_csv {
                    let csv = file.replace(".bin", ".csv");
                    f.write_csv(&dir.join(&csv))?;
                    out.push(csv);
                }
            }
            Ok(out)
        })
    }

    fn observations(&mut self) -> Result<String> {
        if let Some(h) = self.hashes.get(&Stage::Observations) {
            return Ok(h.clone());
        }
        let c = self.cfg;
        let key = format!("{:?}|{}|{}", c.task, c.n_obs, c.seed);
        self.stage(Stage::Observations, key, vec![], |ctx, dir| {
            let task = &ctx.cfg.task;
            let set = draw(task, SetKind::Observations, ctx.cfg.n_obs, &ctx.master)?;
            let x = DataFile::new(task, "observations", ctx.cfg.seed, vec![("x".into(), set.x)]);
            let labels = DataFile::new(task, "observation-labels", ctx.cfg.seed, vec![("theta".into(), set.theta)]);
            x.save(&dir.join(OBS_FILE))?;
            labels.save(&dir.join(OBS_LABEL_FILE))?;
            let mut out = vec![OBS_FILE.to_string(), OBS_LABEL_FILE.to_string()];
            if ctx.cfg.export_csv {
                x.write_csv(&dir.join("data/observations.csv"))?;
                labels.write_csv(&dir.join("data/observation-labels.csv"))?;
                out.extend(["data/observations.csv".into(), "data/observation-labels.csv".into()]);
            }
            Ok(out)
        })
    }

    fn summaries(&mut self) -> Result<String> {
        if let Some(h) = self.hashes.get(&Stage::Summaries) {
            return Ok(h.clone());
        }
        let up = self.simulate()?;
        let c = self.cfg;
        let key = if c.task.needs_encoder() {
            format!("{up}|{}|{:?}", c.npe.train.validation_fraction, c.encoder)
        } else {
            format!("{up}|{}", c.npe.train.validation_fraction)
        };
        self.stage(Stage::Summaries, key, vec![SIM_FILE.into(), TEST_FILE.into()], |ctx, dir| {
            let task = &ctx.cfg.task;
            let sims = DataFile::load_checked(&dir.join(SIM_FILE), task, "simulations")?;
            let test = DataFile::load_checked(&dir.join(TEST_FILE), task, "test")?;
            let theta = sims.require("theta", &dir.join(SIM_FILE))?;
            let x = sims.require("x", &dir.join(SIM_FILE))?;
            let split = ctx.split();
            let (train, val) = (&split.0, &split.1);
            let raw = Standardizer::fit(&x, train)?;
            raw.save(&dir.join(RAW_STD))?;
            let mut out = vec![RAW_STD.to_string()];
            let theta_std = ctx.theta_scaler()?.apply(&theta)?;
            let xs = raw.apply(&x)?;
            let (summ, z) = if task.needs_encoder() {
                let e = &ctx.cfg.encoder;
                let arch = e.arch(raw.output_dim());
                arch.validate()?;
                let obj = InfoMaxObjective {
                    encoder: arch.clone(),
                    critic: Discriminator::new(e.embed_dim, task.theta_dim()),
                    x: xs.clone(),
                    theta: theta_std.clone(),
                    shuffles: e.shuffles,
                };
                let mut rng = ctx.rng(Stage::Summaries);
                let init = obj.init(&mut rng);
                let mut opt = OptimizerState::new(init.len(), e.adam.clone());
                let res = train_loop_with_split(&obj, init, &mut opt, &e.train, train, val, &mut rng)?;
                log_outcome("encoder", &res);
                fs::write(dir.join("history-encoder.csv"), history_csv(&res.history))?;
                let params = res.params[..arch.num_params()].to_vec();
                Checkpoint {
                    kind: ENCODER_KIND.into(),
                    header: toml::to_string(&arch).expect("arch serializes"),
                    params: params.clone(),
                    optimizer: None,
                }
                .save(&dir.join(ENCODER_FILE))?;
                let emb = embed_rows(&arch, &params, &xs)?;
                let post = Standardizer::fit(&emb, train)?;
                post.save(&dir.join(EMBED_STD))?;
                out.extend([ENCODER_FILE.into(), EMBED_STD.into(), "history-encoder.csv".into()]);
                let z = post.apply(&emb)?;
                (
                    Summarizer {
                        raw,
                        encoder: Some((arch, params)),
                        embedded: Some(post),
                    },
                    z,
                )
            } else {
                (
                    Summarizer {
                        raw,
                        encoder: None,
                        embedded: None,
                    },
                    xs,
                )
            };
            DataFile::new(task, "z-simulations", ctx.cfg.seed, vec![("theta".into(), theta_std), ("z".into(), z)])
                .save(&dir.join(Z_SIM_FILE))?;
            let test_theta = test.require("theta", &dir.join(TEST_FILE))?;
            let test_z = summ.apply(&test.require("x", &dir.join(TEST_FILE))?)?;
            DataFile::new(task, "z-test", ctx.cfg.seed, vec![("theta".into(), test_theta), ("z".into(), test_z)])
                .save(&dir.join(Z_TEST_FILE))?;
            out.extend([Z_SIM_FILE.into(), Z_TEST_FILE.into()]);
            Ok(out)
        })
    }

    fn model_sims(&mut self) -> Result<Rc<ModelData>> {
        if let Some(d) = &self.model_sims {
            return Ok(d.clone());
        }
        let path = self.paths.shared.join(Z_SIM_FILE);
        let f = DataFile::load_checked(&path, &self.cfg.task, "z-simulations")?;
        let theta = f.require("theta", &path)?;
        let d = Rc::new(ModelData {
            v: self.space()?.from_theta(&theta)?,
            theta,
            z: f.require("z", &path)?,
        });
        self.model_sims = Some(d.clone());
        Ok(d)
    }

    fn train_flow(
        &mut self,
        name: &str,
        obj: &dyn Objective,
        init: Vec<f64>,
        mask: Vec<bool>,
        adam: &crate::networks::AdamConfig,
        train_cfg: &TrainConfig,
        rng: &mut RngState,
        dir: &Path,
    ) -> Result<(TrainOutcome, OptimizerState)> {
        let split = self.split();
        let mut opt = OptimizerState::new(init.len(), adam.clone()).with_decay_mask(mask);
        let res = train_loop_with_split(obj, init, &mut opt, train_cfg, &split.0, &split.1, rng)?;
        log_outcome(name, &res);
        fs::write(dir.join(format!("history-{name}.csv")), history_csv(&res.history))?;
        Ok((res, opt))
    }

    /// NPE, or NNPE with spike-and-slab corruption.
    fn posterior_baseline(&mut self, noisy: bool) -> Result<String> {
        let stage = if noisy { Stage::Nnpe } else { Stage::Npe };
        if let Some(h) = self.hashes.get(&stage) {
            return Ok(h.clone());
        }
        let up = self.summaries()?;
        let c = self.cfg;
        let space = self.space()?;
        let key = if noisy {
            format!("{up}|{space:?}|{:?}|{:?}|{:?}", c.flow, c.npe, c.nnpe)
        } else {
            format!("{up}|{space:?}|{:?}|{:?}", c.flow, c.npe)
        };
        self.stage(stage, key, vec![Z_SIM_FILE.into()], |ctx, dir| {
            let data = ctx.model_sims()?;
            let arch = ctx.cfg.flow.arch(data.theta.cols(), data.z.cols());
            let corruption = if noisy {
                Corruption::SpikeSlab {
                    prob: ctx.cfg.nnpe.prob,
                    scale: ctx.cfg.nnpe.scale,
                }
            } else {
                Corruption::None
            };
            let obj = DensityObjective::posterior(arch.clone(), data.v.clone(), data.z.clone(), corruption);
            let mut rng = ctx.rng(stage);
            let flow = ConditionalFlow::new(arch.clone(), &mut rng)?;
            let st = ctx.cfg.npe.clone();
            let (res, opt) = ctx.train_flow(stage.name(), &obj, flow.params().to_vec(), arch.decay_mask(), &st.adam, &st.train, &mut rng, dir)?;
            let file = if noisy { NNPE_FILE } else { NPE_FILE };
            ConditionalFlow::from_params(arch, res.params)?
                .to_checkpoint(Some(opt.snapshot()))
                .save(&dir.join(file))?;
            Ok(vec![file.into(), format!("history-{}.csv", stage.name())])
        })
    }

    fn likelihood(&mut self) -> Result<String> {
        if let Some(h) = self.hashes.get(&Stage::Likelihood) {
            return Ok(h.clone());
        }
        let up = self.summaries()?;
        let key = format!("{up}|{:?}|{:?}", self.cfg.flow, self.cfg.nle);
        self.stage(Stage::Likelihood, key, vec![Z_SIM_FILE.into()], |ctx, dir| {
            let data = ctx.model_sims()?;
            let arch = ctx.cfg.flow.arch(data.z.cols(), data.theta.cols());
            let obj = DensityObjective::likelihood(arch.clone(), data.theta.clone(), data.z.clone());
            let mut rng = ctx.rng(Stage::Likelihood);
            let flow = ConditionalFlow::new(arch.clone(), &mut rng)?;
            let st = ctx.cfg.nle.clone();
            let (res, opt) = ctx.train_flow("likelihood", &obj, flow.params().to_vec(), arch.decay_mask(), &st.adam, &st.train, &mut rng, dir)?;
            ConditionalFlow::from_params(arch, res.params)?
                .to_checkpoint(Some(opt.snapshot()))
                .save(&dir.join(LIKELIHOOD_FILE))?;
            Ok(vec![LIKELIHOOD_FILE.into(), "history-likelihood.csv".into()])
        })
    }

    fn variational(&mut self) -> Result<String> {
        if let Some(h) = self.hashes.get(&Stage::Variational) {
            return Ok(h.clone());
        }
        let kind = self
            .cfg
            .method
            .error_model()
            .ok_or_else(|| Error::Config(format!("{} has no variational stage", self.cfg.method)))?;
        let cfg: &'a RunConfig = self.cfg;
        let summ = self.summaries()?;
        let lik = self.likelihood()?;
        let obs = self.observations()?;
        let v = &cfg.variational;
        let warm = if v.warm_start { self.posterior_baseline(false)? } else { String::new() };
        let space = self.space()?;
        let key = format!("{summ}|{lik}|{obs}|{warm}|{space:?}|{kind:?}|{:?}|{:?}", cfg.flow, v);
        let shared = |f: &str| self.paths.shared.join(f).display().to_string();
        let mut inputs = vec![
            shared(RAW_STD),
            shared(LIKELIHOOD_FILE),
            self.paths.run.join(OBS_FILE).display().to_string(),
        ];
        if cfg.task.needs_encoder() {
            inputs.extend([shared(ENCODER_FILE), shared(EMBED_STD)]);
        }
        if v.warm_start {
            inputs.push(shared(NPE_FILE));
        }
        self.stage(Stage::Variational, key, inputs, |ctx, dir| {
            let shared = ctx.paths.shared.clone();
            let task = &ctx.cfg.task;
            let v = &ctx.cfg.variational;
            let summarizer = Summarizer::load(&shared)?;
            let obs_path = dir.join(OBS_FILE);
            let raw = DataFile::load_checked(&obs_path, task, "observations")?.require("x", &obs_path)?;
            let z_obs = summarizer.apply(&raw)?;
            let likelihood = ConditionalFlow::load(&shared.join(LIKELIHOOD_FILE))?;
            let theta_dim = task.theta_dim();
            let arch = ctx.cfg.flow.arch(theta_dim, z_obs.cols());
            let mut rng = ctx.rng(Stage::Variational);
            let posterior = if v.warm_start {
                let f = ConditionalFlow::load(&shared.join(NPE_FILE))?;
                if f.arch() != &arch {
                    return Err(Error::Config("warm-start posterior has a different architecture".into()));
                }
                f
            } else {
                ConditionalFlow::new(arch.clone(), &mut rng)?
            };
            let error = ErrorArch::new(kind, theta_dim, z_obs.cols());
            let mut init = posterior.params().to_vec();
            init.extend(error.init(&mut rng));
            let mut mask = arch.decay_mask();
            mask.extend(error.decay_mask());
            let obj = RvnpObjective {
                posterior: arch.clone(),
                error: error.clone(),
                likelihood: &likelihood,
                z_obs,
                space: ctx.space()?,
                cfg: RvnpLossConfig {
                    k: v.train.importance_samples,
                    m: v.inner_samples,
                    log_prior_xi: None,
                },
            };
            let mut opt = OptimizerState::grouped(vec![
                (arch.num_params(), v.posterior_adam.clone()),
                (error.num_params(), v.error_adam.clone()),
            ])
            .with_decay_mask(mask);
            let (train, val) = split_indices(obj.z_obs.rows(), v.train.validation_fraction, &mut rng);
            let res = train_loop_with_split(&obj, init, &mut opt, &v.train, &train, &val, &mut rng)?;
            log_outcome("variational", &res);
            fs::write(dir.join("history-variational.csv"), history_csv(&res.history))?;
            let (phi, alpha) = obj.split(&res.params);
            let snap = opt.snapshot();
            ConditionalFlow::from_params(arch, phi.to_vec())?
                .to_checkpoint(Some(snap))
                .save(&dir.join(POSTERIOR_FILE))?;
            let em = ErrorModel::from_params(error, alpha.to_vec())?;
            em.save(&dir.join(ERROR_FILE))?;
            log_error_summary(&em, &obj.space, &mut rng);
            Ok(vec![POSTERIOR_FILE.into(), ERROR_FILE.into(), "history-variational.csv".into()])
        })
    }

    fn tune(&mut self) -> Result<String> {
        if let Some(h) = self.hashes.get(&Stage::Tune) {
            return Ok(h.clone());
        }
        let var = self.variational()?;
        let key = format!("{var}|{:?}", self.cfg.tuning);
        let inputs = vec![
            self.paths.shared.join(Z_SIM_FILE).display().to_string(),
            self.paths.run.join(POSTERIOR_FILE).display().to_string(),
            self.paths.run.join(ERROR_FILE).display().to_string(),
        ];
        self.stage(Stage::Tune, key, inputs, |ctx, dir| {
            let data = ctx.model_sims()?;
            let start = ConditionalFlow::load(&dir.join(POSTERIOR_FILE))?;
            let em = ErrorModel::load(&dir.join(ERROR_FILE))?;
            let arch = start.arch().clone();
            let obj = DensityObjective::posterior(
                arch.clone(),
                data.v.clone(),
                data.z.clone(),
                Corruption::ErrorModel(Box::new(em)),
            );
            let mut rng = ctx.rng(Stage::Tune);
            let st = ctx.cfg.tuning.clone();
            let (res, opt) = ctx.train_flow("tune", &obj, start.params().to_vec(), arch.decay_mask(), &st.adam, &st.train, &mut rng, dir)?;
            ConditionalFlow::from_params(arch, res.params)?
                .to_checkpoint(Some(opt.snapshot()))
                .save(&dir.join(TUNED_FILE))?;
            Ok(vec![TUNED_FILE.into(), "history-tune.csv".into()])
        })
    }

    fn evaluate(&mut self) -> Result<String> {
        if let Some(h) = self.hashes.get(&Stage::Evaluate) {
            return Ok(h.clone());
        }
        let method = self.cfg.method;
        let flags = method.stages();
        let (up, post_path) = if flags.tune_posterior {
            (self.tune()?, self.paths.run.join(TUNED_FILE))
        } else if flags.train_variational {
            (self.variational()?, self.paths.run.join(POSTERIOR_FILE))
        } else if method == Method::Nnpe {
            (self.posterior_baseline(true)?, self.paths.shared.join(NNPE_FILE))
        } else {
            (self.posterior_baseline(false)?, self.paths.shared.join(NPE_FILE))
        };
        self.summaries()?;
        let key = format!("{up}|{}|{:?}", method.slug(), self.cfg.evaluation);
        let inputs = vec![
            post_path.display().to_string(),
            self.paths.shared.join(Z_TEST_FILE).display().to_string(),
        ];
        self.stage(Stage::Evaluate, key, inputs, |ctx, dir| {
            let flow = ConditionalFlow::load(&post_path)?;
            let path = ctx.paths.shared.join(Z_TEST_FILE);
            let test = DataFile::load_checked(&path, &ctx.cfg.task, "z-test")?;
            let theta = test.require("theta", &path)?;
            let z = test.require("z", &path)?;
            let scaler = ctx.theta_scaler()?;
            let space = ctx.space()?;
            let spaced = SpacePosterior {
                inner: &flow,
                space: &space,
            };
            let post = ScaledPosterior {
                inner: &spaced,
                theta: &scaler,
            };
            let prior = ctx.prior()?;
            let widths = nmse_widths(&prior);
            let report = MetricReport::compute(
                &post,
                &theta,
                &z,
                &widths,
                ctx.cfg.evaluation.samples,
                &ctx.rng(Stage::Evaluate),
            )?;
            let rel = metrics_rel(method);
            let title = format!("{} · {}", ctx.cfg.task.name(), method);
            report.write(&dir.join(&rel), &title)?;
            log::info!(
                "{method}: α = {:.4}, LPP = {:.4}, NMSE = {:.4}",
                report.alpha(),
                report.lpp,
                report.nmse.mean
            );
            Ok(["metrics.csv", "coverage.csv", "coverage.svg"]
                .iter()
                .map(|f| format!("{rel}/{f}"))
                .collect())
        })
    }
}

fn metrics_rel(method: Method) -> String {
    format!("metrics/{}", method.slug())
}

/// Normalizing widths for NMSE: the prior range, or 4σ for an unbounded
/// Gaussian prior.
pub fn nmse_widths(prior: &Prior) -> Vec<f64> {
    prior
        .widths()
        .unwrap_or_else(|_| prior.std().iter().map(|s| 4.0 * s).collect())
}

fn log_outcome(name: &str, res: &TrainOutcome) {
    log::info!(
        "{name}: {} epochs, best validation {:.5} at epoch {}, {:?}, {:.1} s",
        res.history.len(),
        res.best_validation,
        res.best_epoch,
        res.stop,
        res.seconds
    );
}

fn log_error_summary(em: &ErrorModel, space: &ParamSpace, rng: &mut RngState) {
    let mut max = 0.0f64;
    let mut mean = 0.0;
    let n = 200;
    let prior = match space {
        ParamSpace::Direct { prior } => prior.clone(),
        ParamSpace::Logit { low, high } => Prior::uniform(low.clone(), high.clone()).expect("valid box"),
    };
    let Ok(draws) = space.from_theta(&prior.sample_matrix(n, rng)) else {
        return;
    };
    for i in 0..n {
        if let Ok(v) = em.variances(draws.row(i)) {
            max = max.max(v.iter().copied().fold(0.0, f64::max));
            mean += v.iter().sum::<f64>() / v.len() as f64;
        }
    }
    log::info!("error model: mean variance {:.3e}, max {:.3e} over prior draws", mean / n as f64, max);
}

/// How far to take a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    /// Simulations, test set and observations.
    Simulate,
    /// Summary statistics (the encoder for raw series).
    Summaries,
    /// The likelihood flow.
    Likelihood,
    /// The variational stage (or the baseline posterior for NPE/NNPE).
    Variational,
    /// Posterior tuning (or whatever the method's last training stage is).
    Tune,
    /// Everything, including metrics.
    Evaluate,
}

/// Runs the stages needed for `target`.
///
/// Stages whose manifest record matches their input hash are skipped, so a
/// repeated call performs no work. With `resume = false` the manifests are
/// cleared first and everything reruns.
pub fn run_pipeline(cfg: &RunConfig, paths: &RunPaths, target: Target, resume: bool) -> Result<PipelineOutcome> {
    cfg.validate()?;
    fs::create_dir_all(&paths.run)?;
    fs::create_dir_all(&paths.shared)?;
    if !resume {
        RunManifest::clear(&paths.run)?;
        RunManifest::clear(&paths.shared)?;
    }
    fs::write(paths.run.join("config.toml"), cfg.to_toml())?;
    let mut ctx = Ctx {
        cfg,
        paths,
        master: RngState::new(cfg.seed),
        config_hash: cfg.hash(),
        hashes: HashMap::new(),
        executed: vec![],
        skipped: vec![],
        split: None,
        model_sims: None,
    };
    let flags = cfg.method.stages();
    let last_training = |ctx: &mut Ctx| -> Result<String> {
        if flags.tune_posterior {
            ctx.tune()
        } else if flags.train_variational {
            ctx.variational()
        } else {
            ctx.posterior_baseline(cfg.method == Method::Nnpe)
        }
    };
    match target {
        Target::Simulate => {
            ctx.simulate()?;
            ctx.observations()?;
        }
        Target::Summaries => {
            ctx.summaries()?;
        }
        Target::Likelihood => {
            ctx.likelihood()?;
        }
        Target::Variational => {
            if flags.train_variational {
                ctx.variational()?;
            } else {
                last_training(&mut ctx)?;
            }
        }
        Target::Tune => {
            last_training(&mut ctx)?;
        }
        Target::Evaluate => {
            ctx.evaluate()?;
        }
    }
    let metrics_dir = ctx
        .hashes
        .contains_key(&Stage::Evaluate)
        .then(|| ctx.dir(Stage::Evaluate).join(metrics_rel(cfg.method)));
    Ok(PipelineOutcome {
        executed: ctx.executed,
        skipped: ctx.skipped,
        metrics_dir,
    })
}

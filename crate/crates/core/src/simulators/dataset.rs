//! Simulation corpus, observation set and labelled test set, plus their
//! on-disk format.
//!
//! Binary layout (little-endian):
//!
//! ```text
//! magic     8 bytes  "RVNPDATA"
//! version   u32      currently 1
//! header    u32 length + UTF-8 TOML (task, kind, dims, count, seed, config hash)
//! n_blocks  u32
//! per block: name (u32 length + UTF-8), rows u64, cols u64, rows·cols × f64
//! ```
//!
//! Observations and their true parameters live in separate files, so
//! nothing that training reads can leak the labels.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};

use serde::{Deserialize, Serialize};

use super::TaskConfig;
use crate::binio::{put_f64s, put_str, put_u32, put_u64, Reader};
use crate::error::{Error, Result};
use crate::numcore::{par_map, Matrix, RngState};

pub const DATA_MAGIC: &[u8; 8] = b"RVNPDATA";
const DATA_VERSION: u32 = 1;

/// Maximum simulator calls per requested draw before giving up.
const RESAMPLE_FACTOR: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataHeader {
    pub task: String,
    pub kind: String,
    pub theta_dim: usize,
    pub data_dim: usize,
    pub count: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataFile {
    pub header: DataHeader,
    pub blocks: Vec<(String, Matrix)>,
}

impl DataFile {
    /// A file of the given kind for `task`, holding `blocks`.
    pub fn new(task: &TaskConfig, kind: &str, seed: u64, blocks: Vec<(String, Matrix)>) -> Self {
        let count = blocks.first().map_or(0, |b| b.1.rows());
        Self {
            header: DataHeader {
                task: task.name().into(),
                kind: kind.into(),
                theta_dim: task.theta_dim(),
                data_dim: task.data_dim(),
                count,
                seed,
                config_hash: task.hash(),
            },
            blocks,
        }
    }

    /// Loads a file and checks that it is of `kind` and was drawn from `task`.
    pub fn load_checked(path: &Path, task: &TaskConfig, kind: &str) -> Result<Self> {
        let f = Self::load(path)?;
        if f.header.kind != kind || f.header.config_hash != task.hash() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("not a {kind} file for this task config"),
            });
        }
        Ok(f)
    }

    /// A block that must be present.
    pub fn require(&self, name: &str, path: &Path) -> Result<Matrix> {
        self.block(name).cloned().ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            reason: format!("missing block {name}"),
        })
    }

    pub fn block(&self, name: &str) -> Option<&Matrix> {
        self.blocks.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATA_MAGIC);
        put_u32(&mut buf, DATA_VERSION);
        put_str(&mut buf, &toml::to_string(&self.header).expect("header serializes"));
        put_u32(&mut buf, self.blocks.len() as u32);
        for (name, m) in &self.blocks {
            put_str(&mut buf, name);
            put_u64(&mut buf, m.rows() as u64);
            put_u64(&mut buf, m.cols() as u64);
            put_f64s(&mut buf, m.as_slice());
        }
        buf
    }

    pub fn from_bytes(data: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader::new(data, path);
        if r.take(8)? != DATA_MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != DATA_VERSION {
            return Err(r.fail(format!("unsupported version {version}")));
        }
        let header: DataHeader =
            toml::from_str(&r.string()?).map_err(|e| r.fail(format!("header: {e}")))?;
        let n = r.u32()? as usize;
        let mut blocks = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            let len = rows.checked_mul(cols).ok_or_else(|| r.fail("block too large"))?;
            blocks.push((name, Matrix::from_vec(rows, cols, r.f64s(len)?)));
        }
        if !r.at_end() {
            return Err(r.fail("trailing bytes"));
        }
        Ok(Self { header, blocks })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    /// All blocks side by side, columns named `<block>_<j>`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let rows = self.blocks.first().map_or(0, |(_, m)| m.rows());
        if self.blocks.iter().any(|(_, m)| m.rows() != rows) {
            return Err(Error::arg("blocks differ in length"));
        }
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        let names: Vec<String> = self
            .blocks
            .iter()
            .flat_map(|(n, m)| (0..m.cols()).map(move |j| format!("{n}_{j}")))
            .collect();
        writeln!(out, "{}", names.join(","))?;
        for i in 0..rows {
            let line: Vec<String> = self
                .blocks
                .iter()
                .flat_map(|(_, m)| m.row(i).iter().map(|v| v.to_string()))
                .collect();
            writeln!(out, "{}", line.join(","))?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Parameters with the data they generated.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledSet {
    pub theta: Matrix,
    pub x: Matrix,
}

impl LabelledSet {
    pub fn len(&self) -> usize {
        self.theta.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.rows() == 0
    }
}

/// Everything a run needs: the simulation budget, the unlabelled
/// observations used for training, their held-out true parameters, and a
/// separate labelled test set from the observation process.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub task: TaskConfig,
    pub seed: u64,
    pub simulations: LabelledSet,
    pub observations: Matrix,
    pub observation_labels: Matrix,
    pub test: LabelledSet,
}

fn draw_set(
    task: &TaskConfig,
    n: usize,
    observe: bool,
    rng: &RngState,
) -> Result<LabelledSet> {
    let prior = task.prior()?;
    let budget = RESAMPLE_FACTOR * n.max(1);
    let exhausted = AtomicBool::new(false);
    let draws = par_map(n, |i| {
        let mut r = rng.split(i as u64);
        for attempt in 1..=budget {
            if exhausted.load(Ordering::Relaxed) {
                return None;
            }
            let theta = prior.sample(&mut r);
            let x = if observe {
                task.observe(&theta, &mut r)
            } else {
                task.simulate(&theta, &mut r)
            };
            if let Some(x) = x {
                return Some((theta, x, attempt));
            }
        }
        exhausted.store(true, Ordering::Relaxed);
        None
    });
    let mut attempts = 0;
    let mut theta = Vec::with_capacity(n * task.theta_dim());
    let mut x = Vec::with_capacity(n * task.data_dim());
    for d in draws {
        let Some((t, xi, a)) = d else {
            return Err(Error::Task(format!(
                "{}: degenerate draws exhausted the resampling budget",
                task.name()
            )));
        };
        attempts += a;
        theta.extend(t);
        x.extend(xi);
    }
    if attempts > budget {
        return Err(Error::Task(format!(
            "{}: {attempts} simulator calls for {n} draws exceed the resampling budget",
            task.name()
        )));
    }
    if attempts > n {
        log::info!("{}: resampled {} degenerate draws", task.name(), attempts - n);
    }
    Ok(LabelledSet {
        theta: Matrix::from_vec(n, task.theta_dim(), theta),
        x: Matrix::from_vec(n, task.data_dim(), x),
    })
}

/// The three independently seeded sets of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SetKind {
    /// Simulator draws for training.
    Simulations,
    /// Draws from the observation process used for training (labels held out).
    Observations,
    /// Labelled draws from the observation process for evaluation.
    Test,
}

impl SetKind {
    pub fn name(self) -> &'static str {
        match self {
            SetKind::Simulations => "simulations",
            SetKind::Observations => "observations",
            SetKind::Test => "test",
        }
    }
}

/// Draws one set from the substream of `rng` named after `kind`; row `i`
/// depends only on the seed, the kind and `i`.
pub fn draw(task: &TaskConfig, kind: SetKind, n: usize, rng: &RngState) -> Result<LabelledSet> {
    draw_set(task, n, kind != SetKind::Simulations, &rng.split_named(kind.name()))
}

/// Draws all three sets with independent, index-addressed streams, so the
/// result depends only on the seed and the sizes.
pub fn build_datasets(
    task: &TaskConfig,
    n_sim: usize,
    n_obs: usize,
    n_test: usize,
    rng: &RngState,
) -> Result<Datasets> {
    task.validate()?;
    if n_sim == 0 || n_obs == 0 {
        return Err(Error::arg("need at least one simulation and one observation"));
    }
    let simulations = draw(task, SetKind::Simulations, n_sim, rng)?;
    let obs = draw(task, SetKind::Observations, n_obs, rng)?;
    let test = draw(task, SetKind::Test, n_test, rng)?;
    Ok(Datasets {
        task: task.clone(),
        seed: rng.seed(),
        simulations,
        observations: obs.x,
        observation_labels: obs.theta,
        test,
    })
}

const FILES: [&str; 4] = ["simulations", "observations", "observation-labels", "test"];

impl Datasets {
    fn header(&self, kind: &str, count: usize) -> DataHeader {
        DataHeader {
            task: self.task.name().into(),
            kind: kind.into(),
            theta_dim: self.task.theta_dim(),
            data_dim: self.task.data_dim(),
            count,
            seed: self.seed,
            config_hash: self.task.hash(),
        }
    }

    fn files(&self) -> Vec<DataFile> {
        let s = &self.simulations;
        vec![
            DataFile {
                header: self.header("simulations", s.len()),
                blocks: vec![("theta".into(), s.theta.clone()), ("x".into(), s.x.clone())],
            },
            DataFile {
                header: self.header("observations", self.observations.rows()),
                blocks: vec![("x".into(), self.observations.clone())],
            },
            DataFile {
                header: self.header("observation-labels", self.observation_labels.rows()),
                blocks: vec![("theta".into(), self.observation_labels.clone())],
            },
            DataFile {
                header: self.header("test", self.test.len()),
                blocks: vec![
                    ("theta".into(), self.test.theta.clone()),
                    ("x".into(), self.test.x.clone()),
                ],
            },
        ]
    }

    /// Writes `<kind>.bin` and, with `csv`, `<kind>.csv` for each set.
    pub fn save(&self, dir: &Path, csv: bool) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (f, stem) in self.files().iter().zip(FILES) {
            f.save(&dir.join(format!("{stem}.bin")))?;
            if csv {
                f.write_csv(&dir.join(format!("{stem}.csv")))?;
            }
        }
        Ok(())
    }

    pub fn load(dir: &Path, task: &TaskConfig) -> Result<Self> {
        let mut files = Vec::new();
        for kind in FILES {
            let path = dir.join(format!("{kind}.bin"));
            let f = DataFile::load(&path)?;
            if f.header.kind != kind || f.header.config_hash != task.hash() {
                return Err(Error::Format {
                    path,
                    reason: "dataset does not match the task config".into(),
                });
            }
            files.push((f, path));
        }
        let get = |i: usize, block: &str| -> Result<Matrix> {
            let (f, path) = &files[i];
            f.block(block).cloned().ok_or_else(|| Error::Format {
                path: path.clone(),
                reason: format!("missing block {block}"),
            })
        };
        Ok(Self {
            task: task.clone(),
            seed: files[0].0.header.seed,
            simulations: LabelledSet {
                theta: get(0, "theta")?,
                x: get(0, "x")?,
            },
            observations: get(1, "x")?,
            observation_labels: get(2, "theta")?,
            test: LabelledSet {
                theta: get(3, "theta")?,
                x: get(3, "x")?,
            },
        })
    }
}

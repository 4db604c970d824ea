use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::OptimizerState;
use crate::error::{Error, Result};
use crate::numcore::{par_map, RngState};

/// Loop settings shared by every training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Epochs over the training split.
    pub iterations: usize,
    pub patience: usize,
    pub validation_fraction: f64,
    /// Importance samples per observation for the variational stage.
    pub importance_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            iterations: 500,
            patience: 100,
            validation_fraction: 0.1,
            importance_samples: 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.iterations == 0 || self.patience == 0 || self.importance_samples == 0 {
            return Err(Error::Config(format!("training counts must be positive: {self:?}")));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::Config(format!(
                "validation fraction {} not in (0, 1)",
                self.validation_fraction
            )));
        }
        Ok(())
    }
}

/// A loss that decomposes over examples.
///
/// `chunk` returns the *sum* of per-example losses over `idx` and, when
/// asked, its gradient. The loop averages. Implementations draw any noise
/// from `rng`, which is derived from the chunk position, so results do not
/// depend on how chunks are scheduled across threads.
pub trait Objective: Sync {
    fn len(&self) -> usize;

    fn chunk(
        &self,
        params: &[f64],
        idx: &[usize],
        rng: &mut RngState,
        with_grad: bool,
    ) -> Result<(f64, Option<Vec<f64>>)>;
}

/// Rows per independently evaluated chunk. Fixed so that the reduction
/// order, and therefore every bit of the result, is independent of the
/// worker count.
pub const CHUNK_ROWS: usize = 64;

/// Mean loss (and gradient) over `idx`, evaluated in fixed-size chunks that
/// may run in parallel and are reduced in order.
pub fn evaluate_mean(
    obj: &dyn Objective,
    params: &[f64],
    idx: &[usize],
    rng: &RngState,
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    if idx.is_empty() {
        return Err(Error::arg("empty batch"));
    }
    let mut chunks: Vec<&[usize]> = idx.chunks(CHUNK_ROWS).collect();
    // a trailing single row joins its neighbour: pairwise losses need two
    if chunks.len() > 1 && chunks[chunks.len() - 1].len() == 1 {
        chunks.pop();
        let n = chunks.len();
        chunks[n - 1] = &idx[(n - 1) * CHUNK_ROWS..];
    }
    let results = par_map(chunks.len(), |c| {
        obj.chunk(params, chunks[c], &mut rng.split(c as u64), with_grad)
    });
    let n = idx.len() as f64;
    let mut total = 0.0;
    let mut grad: Option<Vec<f64>> = None;
    for r in results {
        let (l, g) = r?;
        total += l;
        if let Some(g) = g {
            match grad.as_mut() {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                None => grad = Some(g),
            }
        }
    }
    if let Some(g) = grad.as_mut() {
        g.iter_mut().for_each(|v| *v /= n);
    }
    Ok((total / n, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    Completed,
    EarlyStopped,
    /// A non-finite loss or gradient; the best parameters so far are kept.
    NonFinite { iteration: usize },
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: Vec<f64>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_validation: f64,
    pub stop: StopReason,
    pub seconds: f64,
}

/// Split of example indices into training and validation parts.
pub fn split_indices(n: usize, fraction: f64, rng: &mut RngState) -> (Vec<usize>, Vec<usize>) {
    let perm = rng.permutation(n);
    let n_val = if n < 2 { 0 } else { ((n as f64 * fraction).round() as usize).clamp(1, n - 1) };
    let (val, train) = perm.split_at(n_val);
    (train.to_vec(), val.to_vec())
}

/// Minibatch Adam over epochs with early stopping on validation loss.
///
/// Returns the parameters with the lowest validation loss. Validation
/// noise (for stochastic objectives) is drawn from the same stream every
/// epoch, so epochs are compared on common random numbers. With fewer than
/// two examples the training loss stands in for validation.
pub fn train_loop(
    obj: &dyn Objective,
    init: Vec<f64>,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if obj.len() == 0 {
        return Err(Error::arg("training data is empty"));
    }
    let (train, val) = split_indices(obj.len(), cfg.validation_fraction, rng);
    train_loop_with_split(obj, init, opt, cfg, &train, &val, rng)
}

/// [`train_loop`] on a given split; `validation_fraction` is ignored.
pub fn train_loop_with_split(
    obj: &dyn Objective,
    init: Vec<f64>,
    opt: &mut OptimizerState,
    cfg: &TrainConfig,
    train: &[usize],
    val: &[usize],
    rng: &mut RngState,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || train.iter().chain(val).any(|&i| i >= obj.len()) {
        return Err(Error::arg("training split is empty or out of range"));
    }
    let start = Instant::now();
    let val_rng = rng.split_named("validation");
    let mut params = init;
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut stop = StopReason::Completed;

    'epochs: for epoch in 0..cfg.iterations {
        let mut order = train.to_vec();
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let key = rng.next_u64();
            let step_rng = rng.split(key);
            let (loss, grad) = evaluate_mean(obj, &params, batch, &step_rng, true)?;
            let grad = grad.expect("gradient requested");
            if !loss.is_finite() {
                stop = StopReason::NonFinite {
                    iteration: opt.step_count() as usize + 1,
                };
                break 'epochs;
            }
            match opt.step(&mut params, &grad) {
                Ok(()) => {}
                Err(Error::Training { iteration, .. }) => {
                    stop = StopReason::NonFinite { iteration };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            sum += loss * batch.len() as f64;
            count += batch.len();
        }
        let train_loss = sum / count as f64;
        let validation_loss = if val.is_empty() {
            train_loss
        } else {
            let mut total = 0.0;
            for batch in val.chunks(cfg.batch_size) {
                let (l, _) = evaluate_mean(obj, &params, batch, &val_rng, false)?;
                total += l * batch.len() as f64;
            }
            total / val.len() as f64
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            validation_loss,
        });
        log::debug!("epoch {epoch}: train {train_loss:.5} validation {validation_loss:.5}");
        if !validation_loss.is_finite() {
            stop = StopReason::NonFinite {
                iteration: opt.step_count() as usize,
            };
            break;
        }
        if validation_loss < best_val {
            best_val = validation_loss;
            best_epoch = epoch;
            best.clone_from(&params);
        } else if epoch - best_epoch >= cfg.patience {
            stop = StopReason::EarlyStopped;
            break;
        }
    }
    if let StopReason::NonFinite { iteration } = stop {
        log::warn!("training stopped at iteration {iteration}: non-finite loss; keeping best parameters");
    }
    Ok(TrainOutcome {
        params: best,
        history,
        best_epoch,
        best_validation: best_val,
        stop,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::adam::AdamConfig;

    /// `(p − t_i)²` summed over coordinates; optimum is the target mean.
    struct Quadratic {
        targets: Vec<Vec<f64>>,
    }

    impl Objective for Quadratic {
        fn len(&self) -> usize {
            self.targets.len()
        }

        fn chunk(&self, p: &[f64], idx: &[usize], _: &mut RngState, g: bool) -> Result<(f64, Option<Vec<f64>>)> {
            let mut loss = 0.0;
            let mut grad = vec![0.0; p.len()];
            for &i in idx {
                for (k, t) in self.targets[i].iter().enumerate() {
                    loss += (p[k] - t).powi(2);
                    grad[k] += 2.0 * (p[k] - t);
                }
            }
            Ok((loss, g.then_some(grad)))
        }
    }

    struct Flat;

    impl Objective for Flat {
        fn len(&self) -> usize {
            50
        }

        fn chunk(&self, p: &[f64], idx: &[usize], rng: &mut RngState, g: bool) -> Result<(f64, Option<Vec<f64>>)> {
            let _ = rng.normal();
            Ok((idx.len() as f64, g.then(|| vec![0.0; p.len()])))
        }
    }

    fn fast() -> OptimizerState {
        OptimizerState::new(
            2,
            AdamConfig {
                lr: 0.05,
                warmup_steps: 10,
                weight_decay: 0.0,
                ..AdamConfig::default()
            },
        )
    }

    #[test]
    fn quadratic_converges_to_optimum() {
        let obj = Quadratic {
            targets: vec![vec![1.5, -0.5]; 40],
        };
        let cfg = TrainConfig {
            batch_size: 8,
            ..TrainConfig::default()
        };
        let out = train_loop(&obj, vec![0.0, 0.0], &mut fast(), &cfg, &mut RngState::new(0)).unwrap();
        assert!((out.params[0] - 1.5).abs() < 1e-3, "{:?}", out.params);
        assert!((out.params[1] + 0.5).abs() < 1e-3, "{:?}", out.params);
    }

    #[test]
    fn stagnant_validation_stops_after_patience() {
        let cfg = TrainConfig {
            batch_size: 10,
            patience: 100,
            ..TrainConfig::default()
        };
        let out = train_loop(&Flat, vec![0.0, 0.0], &mut fast(), &cfg, &mut RngState::new(1)).unwrap();
        assert_eq!(out.stop, StopReason::EarlyStopped);
        assert_eq!(out.best_epoch, 0);
        assert_eq!(out.history.len(), 101);
    }

    #[test]
    fn same_seed_same_history() {
        let obj = Quadratic {
            targets: (0..30).map(|i| vec![i as f64 * 0.1, 1.0]).collect(),
        };
        let cfg = TrainConfig {
            batch_size: 4,
            iterations: 20,
            ..TrainConfig::default()
        };
        let a = train_loop(&obj, vec![0.0; 2], &mut fast(), &cfg, &mut RngState::new(3)).unwrap();
        let b = train_loop(&obj, vec![0.0; 2], &mut fast(), &cfg, &mut RngState::new(3)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn chunked_mean_is_thread_independent() {
        let obj = Quadratic {
            targets: (0..300).map(|i| vec![(i as f64).sin(), 2.0]).collect(),
        };
        let idx: Vec<usize> = (0..300).collect();
        let (l, g) = evaluate_mean(&obj, &[0.3, 0.1], &idx, &RngState::new(0), true).unwrap();
        let (l2, g2) = obj.chunk(&[0.3, 0.1], &idx, &mut RngState::new(0), true).unwrap();
        assert!((l - l2 / 300.0).abs() < 1e-12);
        for (a, b) in g.unwrap().iter().zip(g2.unwrap()) {
            assert!((a - b / 300.0).abs() < 1e-12);
        }
    }
}

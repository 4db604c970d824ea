//! Per-coordinate z-scoring of summaries and parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::metrics::Posterior;
use crate::objectives::ParamSpace;
use crate::numcore::{Matrix, RngState};

pub const STANDARDIZER_KIND: &str = "standardizer";

/// `(x[keep] − mean) / std`. Coordinates without spread are dropped.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub input_dim: usize,
    pub keep: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    input_dim: usize,
    keep: Vec<usize>,
}

impl Standardizer {
    /// Statistics of the rows `rows` of `x` (population std).
    pub fn fit(x: &Matrix, rows: &[usize]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::arg("cannot standardize an empty set"));
        }
        let n = rows.len() as f64;
        let d = x.cols();
        let mut mean = vec![0.0; d];
        for &i in rows {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &i in rows {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let mut out = Self {
            input_dim: d,
            keep: Vec::new(),
            mean: Vec::new(),
            std: Vec::new(),
        };
        for j in 0..d {
            let sd = (var[j] / n).sqrt();
            if sd > 1e-12 * mean[j].abs().max(1.0) && sd.is_finite() {
                out.keep.push(j);
                out.mean.push(mean[j]);
                out.std.push(sd);
            } else {
                log::warn!("dropping summary coordinate {j}: no variation in the training split");
            }
        }
        if out.keep.is_empty() {
            return Err(Error::Numeric("every summary coordinate is constant".into()));
        }
        Ok(out)
    }

    /// Fixed shift and scale on every coordinate.
    pub fn affine(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != std.len() || std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::arg("affine standardizer needs positive scales"));
        }
        Ok(Self {
            input_dim: mean.len(),
            keep: (0..mean.len()).collect(),
            mean,
            std,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.keep.len()
    }

    pub fn apply(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim {
            return Err(Error::arg(format!(
                "standardizer expects {} columns, got {}",
                self.input_dim,
                x.cols()
            )));
        }
        let mut out = Matrix::zeros(x.rows(), self.keep.len());
        for (i, row) in x.iter_rows().enumerate() {
            let o = out.row_mut(i);
            for (k, &j) in self.keep.iter().enumerate() {
                o[k] = (row[j] - self.mean[k]) / self.std[k];
            }
        }
        Ok(out)
    }

    /// Back to original units; dropped coordinates cannot be recovered, so
    /// this only exists for transforms that keep everything.
    pub fn invert(&self, z: &Matrix) -> Result<Matrix> {
        if self.keep.len() != self.input_dim || z.cols() != self.input_dim {
            return Err(Error::arg("only a full-rank standardizer can be inverted"));
        }
        Ok(Matrix::from_vec(
            z.rows(),
            z.cols(),
            z.iter_rows()
                .flat_map(|r| r.iter().zip(self.mean.iter().zip(&self.std)).map(|(v, (m, s))| m + s * v))
                .collect(),
        ))
    }

    /// `Σ ln std`: the log-Jacobian of the inverse map.
    pub fn log_scale(&self) -> f64 {
        self.std.iter().map(|s| s.ln()).sum()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let header = Header {
            input_dim: self.input_dim,
            keep: self.keep.clone(),
        };
        let mut params = self.mean.clone();
        params.extend(&self.std);
        Checkpoint {
            kind: STANDARDIZER_KIND.into(),
            header: toml::to_string(&header).expect("header serializes"),
            params,
            optimizer: None,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, path: &Path) -> Result<Self> {
        ck.expect_kind(STANDARDIZER_KIND, path)?;
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let h: Header = toml::from_str(&ck.header).map_err(|e| bad(e.to_string()))?;
        let k = h.keep.len();
        if ck.params.len() != 2 * k || h.keep.iter().any(|&j| j >= h.input_dim) {
            return Err(bad("inconsistent standardizer".into()));
        }
        Ok(Self {
            input_dim: h.input_dim,
            keep: h.keep,
            mean: ck.params[..k].to_vec(),
            std: ck.params[k..].to_vec(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, path)
    }
}

/// A posterior trained on standardized parameters, reported in original
/// units. Observations are passed already summarized and standardized.
pub struct ScaledPosterior<'a> {
    pub inner: &'a dyn Posterior,
    pub theta: &'a Standardizer,
}

impl Posterior for ScaledPosterior<'_> {
    fn theta_dim(&self) -> usize {
        self.theta.input_dim
    }

    fn log_prob(&self, theta: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
        let z = self.theta.apply(theta)?;
        let c = self.theta.log_scale();
        Ok(self.inner.log_prob(&z, x)?.into_iter().map(|l| l - c).collect())
    }

    fn sample(&self, x: &[f64], n: usize, rng: &mut RngState) -> Result<(Matrix, Vec<f64>)> {
        let (z, lp) = self.inner.sample(x, n, rng)?;
        let c = self.theta.log_scale();
        Ok((self.theta.invert(&z)?, lp.into_iter().map(|l| l - c).collect()))
    }
}

/// A posterior over model coordinates `v`, seen as a density over θ.
pub struct SpacePosterior<'a> {
    pub inner: &'a dyn Posterior,
    pub space: &'a ParamSpace,
}

impl Posterior for SpacePosterior<'_> {
    fn theta_dim(&self) -> usize {
        self.space.dim()
    }

    fn log_prob(&self, theta: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
        let v = self.space.from_theta(theta)?;
        let lq = self.inner.log_prob(&v, x)?;
        Ok(lq.into_iter().enumerate().map(|(i, l)| l - self.space.log_jacobian(v.row(i))).collect())
    }

    fn sample(&self, x: &[f64], n: usize, rng: &mut RngState) -> Result<(Matrix, Vec<f64>)> {
        let (v, lq) = self.inner.sample(x, n, rng)?;
        let lp = lq.into_iter().enumerate().map(|(i, l)| l - self.space.log_jacobian(v.row(i))).collect();
        Ok((self.space.to_theta(&v), lp))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::GaussianPosterior;

    fn data() -> Matrix {
        let mut rng = RngState::new(5);
        let mut x = Matrix::zeros(300, 3);
        for i in 0..300 {
            let r = x.row_mut(i);
            r[0] = 3.0 + 2.0 * rng.normal();
            r[1] = 7.0;
            r[2] = -1e4 + 50.0 * rng.uniform();
        }
        x
    }

    #[test]
    fn training_rows_have_zero_mean_unit_std_and_constants_are_dropped() {
        let x = data();
        let rows: Vec<usize> = (0..200).collect();
        let s = Standardizer::fit(&x, &rows).unwrap();
        assert_eq!(s.keep, vec![0, 2]);
        let z = s.apply(&x.select_rows(&rows)).unwrap();
        for j in 0..2 {
            let c = z.col(j);
            let m = c.iter().sum::<f64>() / 200.0;
            let v = c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 200.0;
            assert!(m.abs() < 1e-10 && (v.sqrt() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn uses_only_the_given_rows() {
        // statistics of the fit rows, not of the rows later transformed
        let x = data();
        let a = Standardizer::fit(&x, &(0..100).collect::<Vec<_>>()).unwrap();
        let b = Standardizer::fit(&x, &(100..300).collect::<Vec<_>>()).unwrap();
        assert_ne!(a.mean, b.mean);
        let other = x.select_rows(&(100..300).collect::<Vec<_>>());
        let z = a.apply(&other).unwrap();
        let expect = (other[(0, 0)] - a.mean[0]) / a.std[0];
        assert_eq!(z[(0, 0)], expect);
    }

    #[test]
    fn inverse_roundtrips_and_checkpoint_is_exact() {
        let x = data().select_cols(&[0, 2]);
        let s = Standardizer::fit(&x, &(0..300).collect::<Vec<_>>()).unwrap();
        let back = s.invert(&s.apply(&x).unwrap()).unwrap();
        for (a, b) in back.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.ckpt");
        s.save(&p).unwrap();
        assert_eq!(Standardizer::load(&p).unwrap(), s);
    }

    #[test]
    fn scaled_posterior_changes_variables() {
        let unit = GaussianPosterior::new(1, |_x: &[f64]| vec![(0.0, 1.0)]);
        let t = Standardizer::affine(vec![10.0], vec![3.0]).unwrap();
        let p = ScaledPosterior { inner: &unit, theta: &t };
        let lp = p.log_prob(&Matrix::from_vec(1, 1, vec![13.0]), &[]).unwrap()[0];
        let direct = -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 - 3f64.ln();
        assert!((lp - direct).abs() < 1e-12);
        let (s, lps) = p.sample(&[], 4000, &mut RngState::new(1)).unwrap();
        let m = s.col(0).iter().sum::<f64>() / 4000.0;
        assert!((m - 10.0).abs() < 0.2);
        let again = p.log_prob(&s, &[]).unwrap();
        assert!(again.iter().zip(&lps).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}

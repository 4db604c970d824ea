//! Cancer/stromal point process on the unit square.
//!
//! Cells and tumour parents are uniform; each parent claims every cell
//! within the distance of its `N^d`-th nearest cell. The misspecified
//! generator hollows out tumour cores (necrosis).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::RngState;
use crate::objectives::Prior;

/// Stromal cells sampled for the distance summaries.
pub const STROMAL_SAMPLE: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CsConfig {
    pub lambda_c: [f64; 2],
    pub lambda_p: [f64; 2],
    pub lambda_d: [f64; 2],
    /// Fraction of each tumour radius removed in observations; 0 disables
    /// the misspecification.
    pub rho_core: f64,
}

impl Default for CsConfig {
    fn default() -> Self {
        Self {
            lambda_c: [100.0, 2000.0],
            lambda_p: [1.0, 50.0],
            lambda_d: [1.0, 50.0],
            rho_core: 0.5,
        }
    }
}

impl CsConfig {
    pub fn prior(&self) -> Result<Prior> {
        Prior::uniform(
            vec![self.lambda_c[0], self.lambda_p[0], self.lambda_d[0]],
            vec![self.lambda_c[1], self.lambda_p[1], self.lambda_d[1]],
        )
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.prior()?;
        if let Prior::Uniform { low, .. } = &p {
            if low.iter().any(|&l| l <= 0.0) {
                return Err(Error::Config("CS Poisson rates must be positive".into()));
            }
        }
        if !(0.0..=1.0).contains(&self.rho_core) {
            return Err(Error::Config(format!("rho_core = {} outside [0, 1]", self.rho_core)));
        }
        Ok(())
    }
}

/// One realization of the spatial process before labelling.
#[derive(Clone, Debug, PartialEq)]
pub struct CellField {
    pub cells: Vec<[f64; 2]>,
    pub parents: Vec<[f64; 2]>,
    /// `N^d_i` for each parent.
    pub daughters: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Stromal,
    Cancer,
    /// Necrotic: removed from the tissue altogether.
    Removed,
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

impl CellField {
    pub fn sample(theta: &[f64], rng: &mut RngState) -> Self {
        let n_c = rng.poisson(theta[0]) as usize;
        let n_p = rng.poisson(theta[1]) as usize;
        let point = |rng: &mut RngState| [rng.uniform(), rng.uniform()];
        let cells = (0..n_c).map(|_| point(rng)).collect();
        let parents = (0..n_p).map(|_| point(rng)).collect();
        let daughters = (0..n_p).map(|_| rng.poisson(theta[2]) as usize).collect();
        Self {
            cells,
            parents,
            daughters,
        }
    }

    /// Tumour radius of each parent: distance to its `N^d`-th nearest
    /// cell, 0 for `N^d = 0`, the farthest cell when `N^d` exceeds the
    /// cell count.
    pub fn radii(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.cells.len()];
        self.parents
            .iter()
            .zip(&self.daughters)
            .map(|(&p, &k)| {
                if k == 0 || self.cells.is_empty() {
                    return 0.0;
                }
                for (slot, &c) in d.iter_mut().zip(&self.cells) {
                    *slot = dist(p, c);
                }
                let k = k.min(d.len());
                *d.select_nth_unstable_by(k - 1, f64::total_cmp).1
            })
            .collect()
    }

    /// Labels every cell. Cells on or inside a tumour radius are cancer;
    /// with `rho_core > 0` those within `rho_core · r` of a parent are
    /// removed.
    pub fn label(&self, rho_core: f64) -> Vec<CellKind> {
        let radii = self.radii();
        self.cells
            .iter()
            .map(|&c| {
                let mut kind = CellKind::Stromal;
                for ((&p, &k), &r) in self.parents.iter().zip(&self.daughters).zip(&radii) {
                    if k == 0 {
                        continue;
                    }
                    let d = dist(p, c);
                    if rho_core > 0.0 && d <= rho_core * r {
                        return CellKind::Removed;
                    }
                    if d <= r {
                        kind = CellKind::Cancer;
                    }
                }
                kind
            })
            .collect()
    }

    /// `(#cancer, #stromal, mean, max)` of the nearest-cancer distance over
    /// up to [`STROMAL_SAMPLE`] stromal cells, or `None` without cancer or
    /// stromal cells.
    pub fn summaries(&self, rho_core: f64, rng: &mut RngState) -> Option<Vec<f64>> {
        let kinds = self.label(rho_core);
        let pick = |k: CellKind| -> Vec<[f64; 2]> {
            self.cells
                .iter()
                .zip(&kinds)
                .filter(|(_, &kk)| kk == k)
                .map(|(&c, _)| c)
                .collect()
        };
        let cancer = pick(CellKind::Cancer);
        let stromal = pick(CellKind::Stromal);
        if cancer.is_empty() || stromal.is_empty() {
            return None;
        }
        let chosen: Vec<usize> = if stromal.len() > STROMAL_SAMPLE {
            rng.permutation(stromal.len())[..STROMAL_SAMPLE].to_vec()
        } else {
            log::debug!("only {} stromal cells to sample", stromal.len());
            (0..stromal.len()).collect()
        };
        let mins: Vec<f64> = chosen
            .iter()
            .map(|&i| {
                cancer
                    .iter()
                    .map(|&c| dist(stromal[i], c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let mean = mins.iter().sum::<f64>() / mins.len() as f64;
        let max = mins.iter().copied().fold(0.0, f64::max);
        Some(vec![cancer.len() as f64, stromal.len() as f64, mean, max])
    }
}

/// One draw; the stromal subsample uses its own stream so that the
/// well-specified and necrotic versions of a field share it.
pub fn simulate(theta: &[f64], rho_core: f64, rng: &mut RngState) -> Option<Vec<f64>> {
    let field = CellField::sample(theta, rng);
    let mut sub = rng.split_named("stromal");
    field.summaries(rho_core, &mut sub)
}

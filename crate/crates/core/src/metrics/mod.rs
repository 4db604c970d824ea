//! Posterior quality over a labelled test set: log posterior probability
//! of the truth, expected coverage of highest-density regions with its
//! average calibration α, and prior-width-normalized RMSE.

pub mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::flows::ConditionalFlow;
use crate::numcore::{par_map, Matrix, RngState, LN_2PI};
use crate::objectives::Prior;

/// Default posterior samples per test point.
pub const DEFAULT_SAMPLES: usize = 2000;

/// Anything that can score and draw θ given one observation.
pub trait Posterior: Sync {
    fn theta_dim(&self) -> usize;

    /// `log p(θ_r | x)` for every row of `theta`.
    fn log_prob(&self, theta: &Matrix, x: &[f64]) -> Result<Vec<f64>>;

    /// `n` draws with their log densities.
    fn sample(&self, x: &[f64], n: usize, rng: &mut RngState) -> Result<(Matrix, Vec<f64>)>;
}

impl Posterior for ConditionalFlow {
    fn theta_dim(&self) -> usize {
        self.event_dim()
    }

    fn log_prob(&self, theta: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
        let ctx = Matrix::row_vector(x).repeat_rows(theta.rows());
        ConditionalFlow::log_prob(self, theta, &ctx)
    }

    fn sample(&self, x: &[f64], n: usize, rng: &mut RngState) -> Result<(Matrix, Vec<f64>)> {
        ConditionalFlow::sample(self, x, n, rng)
    }
}

/// The prior itself, ignoring the observation.
impl Posterior for Prior {
    fn theta_dim(&self) -> usize {
        self.dim()
    }

    fn log_prob(&self, theta: &Matrix, _x: &[f64]) -> Result<Vec<f64>> {
        Ok(theta.iter_rows().map(|t| Prior::log_prob(self, t)).collect())
    }

    fn sample(&self, _x: &[f64], n: usize, rng: &mut RngState) -> Result<(Matrix, Vec<f64>)> {
        let t = self.sample_matrix(n, rng);
        let lp = t.iter_rows().map(|r| Prior::log_prob(self, r)).collect();
        Ok((t, lp))
    }
}

/// Independent Gaussians whose means and standard deviations are a
/// function of the observation; the analytic reference in calibration
/// checks.
pub struct GaussianPosterior<F> {
    pub dim: usize,
    pub moments: F,
}

impl<F> GaussianPosterior<F>
where
    F: Fn(&[f64]) -> Vec<(f64, f64)> + Sync,
{
    pub fn new(dim: usize, moments: F) -> Self {
        Self { dim, moments }
    }
}

impl<F> Posterior for GaussianPosterior<F>
where
    F: Fn(&[f64]) -> Vec<(f64, f64)> + Sync,
{
    fn theta_dim(&self) -> usize {
        self.dim
    }

    fn log_prob(&self, theta: &Matrix, x: &[f64]) -> Result<Vec<f64>> {
        let m = (self.moments)(x);
        Ok(theta
            .iter_rows()
            .map(|t| {
                t.iter()
                    .zip(&m)
                    .map(|(v, (mu, s))| -0.5 * (LN_2PI + ((v - mu) / s).powi(2)) - s.ln())
                    .sum()
            })
            .collect())
    }

    fn sample(&self, x: &[f64], n: usize, rng: &mut RngState) -> Result<(Matrix, Vec<f64>)> {
        let m = (self.moments)(x);
        let mut t = Matrix::zeros(n, self.dim);
        for i in 0..n {
            for (j, (mu, s)) in m.iter().enumerate() {
                t.row_mut(i)[j] = mu + s * rng.normal();
            }
        }
        let lp = self.log_prob(&t, x)?;
        Ok((t, lp))
    }
}

fn check_test(theta: &Matrix, x: &Matrix, dim: usize) -> Result<()> {
    if theta.rows() == 0 || theta.rows() != x.rows() {
        return Err(Error::arg("test set must be nonempty with matching θ and x"));
    }
    if theta.cols() != dim {
        return Err(Error::arg("θ dimension does not match the posterior"));
    }
    Ok(())
}

/// `log p(θ*_i | x_i)` for every test pair.
pub fn log_probs(post: &dyn Posterior, theta: &Matrix, x: &Matrix) -> Result<Vec<f64>> {
    check_test(theta, x, post.theta_dim())?;
    let per: Vec<Result<f64>> = par_map(theta.rows(), |i| {
        let t = Matrix::row_vector(theta.row(i));
        Ok(post.log_prob(&t, x.row(i))?[0])
    });
    per.into_iter().collect()
}

/// Mean log posterior probability of the true parameters.
pub fn lpp(post: &dyn Posterior, theta: &Matrix, x: &Matrix) -> Result<f64> {
    let lp = log_probs(post, theta, x)?;
    let mean = lp.iter().sum::<f64>() / lp.len() as f64;
    if mean.is_nan() {
        return Err(Error::numeric("LPP"));
    }
    Ok(mean)
}

/// Fraction of `s` posterior draws that are denser than `θ*`. The truth
/// lies in the γ-HDR exactly when this rank is below γ.
pub fn hdr_rank(
    post: &dyn Posterior,
    x: &[f64],
    theta_star: &[f64],
    s: usize,
    rng: &mut RngState,
) -> Result<f64> {
    let (_, lp) = post.sample(x, s, rng)?;
    let at = post.log_prob(&Matrix::row_vector(theta_star), x)?[0];
    if lp.iter().any(|v| v.is_nan()) || at.is_nan() {
        return Err(Error::numeric("posterior log density"));
    }
    Ok(lp.iter().filter(|&&v| v > at).count() as f64 / s as f64)
}

pub fn hdr_contains(
    post: &dyn Posterior,
    x: &[f64],
    theta_star: &[f64],
    gamma: f64,
    s: usize,
    rng: &mut RngState,
) -> Result<bool> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::arg("credible level must lie in (0, 1)"));
    }
    Ok(hdr_rank(post, x, theta_star, s, rng)? < gamma)
}

/// Credible levels 0.025, 0.05, …, 0.975.
pub fn default_grid() -> Vec<f64> {
    (1..=39).map(|k| k as f64 * 0.025).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoverageCurve {
    pub grid: Vec<f64>,
    pub epc: Vec<f64>,
    pub alpha: f64,
}

impl CoverageCurve {
    /// Coverage from per-test-point HDR ranks; α is the trapezoidal
    /// integral of `EPC(γ) − γ` over the grid.
    pub fn from_ranks(ranks: &[f64], grid: &[f64]) -> Self {
        let n = ranks.len() as f64;
        let epc: Vec<f64> = grid
            .iter()
            .map(|&g| ranks.iter().filter(|&&r| r < g).count() as f64 / n)
            .collect();
        let alpha = grid
            .windows(2)
            .zip(epc.windows(2))
            .map(|(g, e)| 0.5 * (g[1] - g[0]) * ((e[0] - g[0]) + (e[1] - g[1])))
            .sum();
        Self {
            grid: grid.to_vec(),
            epc,
            alpha,
        }
    }
}

/// HDR ranks of every test pair; draw `i` uses stream `rng.split(i)`.
pub fn hdr_ranks(
    post: &dyn Posterior,
    theta: &Matrix,
    x: &Matrix,
    s: usize,
    rng: &RngState,
) -> Result<Vec<f64>> {
    check_test(theta, x, post.theta_dim())?;
    if s == 0 {
        return Err(Error::arg("need posterior samples"));
    }
    par_map(theta.rows(), |i| {
        hdr_rank(post, x.row(i), theta.row(i), s, &mut rng.split(i as u64))
    })
    .into_iter()
    .collect()
}

pub fn epc_curve(
    post: &dyn Posterior,
    theta: &Matrix,
    x: &Matrix,
    grid: &[f64],
    s: usize,
    rng: &RngState,
) -> Result<CoverageCurve> {
    if grid.is_empty() || grid.iter().any(|&g| !(g > 0.0 && g < 1.0)) {
        return Err(Error::arg("credible levels must lie in (0, 1)"));
    }
    Ok(CoverageCurve::from_ranks(&hdr_ranks(post, theta, x, s, rng)?, grid))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Nmse {
    pub mean: f64,
    pub per_coordinate: Vec<f64>,
}

/// Posterior RMSE around the truth divided by the prior width, averaged
/// over coordinates and then over the test set.
pub fn nmse(
    post: &dyn Posterior,
    theta: &Matrix,
    x: &Matrix,
    widths: &[f64],
    s: usize,
    rng: &RngState,
) -> Result<Nmse> {
    check_test(theta, x, post.theta_dim())?;
    if widths.len() != theta.cols() || widths.iter().any(|&w| !(w > 0.0)) {
        return Err(Error::arg("prior widths must be positive, one per coordinate"));
    }
    if s == 0 {
        return Err(Error::arg("need posterior samples"));
    }
    let per: Vec<Result<Vec<f64>>> = par_map(theta.rows(), |i| {
        let (draws, _) = post.sample(x.row(i), s, &mut rng.split(i as u64))?;
        let truth = theta.row(i);
        Ok((0..truth.len())
            .map(|j| {
                let mse = draws.iter_rows().map(|r| (r[j] - truth[j]).powi(2)).sum::<f64>() / s as f64;
                mse.sqrt() / widths[j]
            })
            .collect())
    });
    let mut per_coordinate = vec![0.0; widths.len()];
    for p in per {
        for (acc, v) in per_coordinate.iter_mut().zip(p?) {
            *acc += v;
        }
    }
    let n = theta.rows() as f64;
    per_coordinate.iter_mut().for_each(|v| *v /= n);
    let mean = per_coordinate.iter().sum::<f64>() / per_coordinate.len() as f64;
    Ok(Nmse {
        mean,
        per_coordinate,
    })
}

/// Every metric for one posterior on one test set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub lpp: f64,
    pub curve: CoverageCurve,
    pub nmse: Nmse,
    pub n_test: usize,
    pub samples: usize,
}

impl MetricReport {
    /// `theta` and `x` are the labelled test pairs; the HDR and NMSE draws
    /// use independent substreams of `rng`.
    pub fn compute(
        post: &dyn Posterior,
        theta: &Matrix,
        x: &Matrix,
        widths: &[f64],
        s: usize,
        rng: &RngState,
    ) -> Result<Self> {
        Ok(Self {
            lpp: lpp(post, theta, x)?,
            curve: epc_curve(post, theta, x, &default_grid(), s, &rng.split_named("hdr"))?,
            nmse: nmse(post, theta, x, widths, s, &rng.split_named("nmse"))?,
            n_test: theta.rows(),
            samples: s,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.curve.alpha
    }

    /// `metric,value` rows: lpp, alpha, nmse, per-coordinate NMSE.
    pub fn scalars_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let _ = writeln!(s, "lpp,{}", self.lpp);
        let _ = writeln!(s, "alpha,{}", self.curve.alpha);
        let _ = writeln!(s, "nmse,{}", self.nmse.mean);
        for (j, v) in self.nmse.per_coordinate.iter().enumerate() {
            let _ = writeln!(s, "nmse_{j},{v}");
        }
        let _ = writeln!(s, "n_test,{}", self.n_test);
        let _ = writeln!(s, "samples,{}", self.samples);
        s
    }

    pub fn curve_csv(&self) -> String {
        let mut s = String::from("gamma,epc\n");
        for (g, e) in self.curve.grid.iter().zip(&self.curve.epc) {
            let _ = writeln!(s, "{g},{e}");
        }
        s
    }

    pub fn coverage_svg(&self, title: &str) -> String {
        let mut p = plot::LinePlot::new(title, "credible level γ", "expected coverage");
        p.x_range = Some((0.0, 1.0));
        p.y_range = Some((0.0, 1.0));
        p.series.push(plot::Series::dashed("calibrated", vec![(0.0, 0.0), (1.0, 1.0)]));
        let pts = self.curve.grid.iter().copied().zip(self.curve.epc.iter().copied()).collect();
        p.series.push(plot::Series::line(&format!("α = {:.3}", self.curve.alpha), pts));
        p.to_svg()
    }

    /// Writes `metrics.csv`, `coverage.csv` and `coverage.svg` into `dir`.
    pub fn write(&self, dir: &Path, title: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("metrics.csv"), self.scalars_csv())?;
        fs::write(dir.join("coverage.csv"), self.curve_csv())?;
        fs::write(dir.join("coverage.svg"), self.coverage_svg(title))?;
        Ok(())
    }

    pub fn read_scalars(path: &Path) -> Result<Vec<(String, f64)>> {
        let text = fs::read_to_string(path)?;
        text.lines()
            .skip(1)
            .map(|l| {
                let (k, v) = l.split_once(',').ok_or_else(|| Error::Format {
                    path: path.to_path_buf(),
                    reason: format!("bad line {l:?}"),
                })?;
                let v = v.parse::<f64>().map_err(|e| Error::Format {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?;
                Ok((k.to_string(), v))
            })
            .collect()
    }
}

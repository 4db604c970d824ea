//! Grids of runs over methods, observation counts and seeds, and their
//! aggregate tables and plots.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::config::{Method, RunConfig};
use super::manifest::RunManifest;
use super::run::{run_pipeline, RunPaths, Target};
use crate::error::{Error, Result};
use crate::metrics::plot::{panels, LinePlot, Series};
use crate::metrics::MetricReport;

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
pub const SWEEP_SVG: &str = "sweep.svg";

/// One cell of the grid. Metrics are NaN when the run failed.
#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub method: Method,
    pub n_obs: usize,
    pub seed: u64,
    pub status: String,
    pub alpha: f64,
    pub lpp: f64,
    pub nmse: f64,
}

impl CellResult {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Mean and standard error of one metric over seeds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation over √n; NaN for a single value.
    pub stderr: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                stderr: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let stderr = if values.len() < 2 {
            f64::NAN
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt()
        };
        Self { mean, stderr }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub n_obs: usize,
    /// Successful seeds.
    pub count: usize,
    pub alpha: Stat,
    pub lpp: Stat,
    pub nmse: Stat,
}

/// Groups successful cells by `(method, N_obs)`.
pub fn aggregate(cells: &[CellResult]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(Method, usize), Vec<&CellResult>> = BTreeMap::new();
    for c in cells {
        groups.entry((c.method, c.n_obs)).or_default();
        if c.ok() {
            groups.get_mut(&(c.method, c.n_obs)).expect("inserted").push(c);
        }
    }
    groups
        .into_iter()
        .map(|((method, n_obs), cs)| {
            let col = |f: fn(&CellResult) -> f64| Stat::of(&cs.iter().map(|c| f(c)).collect::<Vec<_>>());
            SummaryRow {
                method,
                n_obs,
                count: cs.len(),
                alpha: col(|c| c.alpha),
                lpp: col(|c| c.lpp),
                nmse: col(|c| c.nmse),
            }
        })
        .collect()
}

pub fn cells_csv(cells: &[CellResult]) -> String {
    let mut s = String::from("method,n_obs,seed,status,alpha,lpp,nmse\n");
    for c in cells {
        let status: String = c.status.chars().map(|ch| if ch == ',' || ch == '\n' { ';' } else { ch }).collect();
        let _ = writeln!(
            s,
            "{},{},{},{status},{},{},{}",
            c.method.slug(),
            c.n_obs,
            c.seed,
            c.alpha,
            c.lpp,
            c.nmse
        );
    }
    s
}

pub fn parse_cells_csv(text: &str, path: &Path) -> Result<Vec<CellResult>> {
    let bad = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut lines = text.lines();
    if lines.next() != Some("method,n_obs,seed,status,alpha,lpp,nmse") {
        return Err(bad("unexpected header".into()));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(bad(format!("bad row {l:?}")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| bad(e.to_string()));
            Ok(CellResult {
                method: f[0].parse()?,
                n_obs: f[1].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                seed: f[2].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                status: f[3].to_string(),
                alpha: num(f[4])?,
                lpp: num(f[5])?,
                nmse: num(f[6])?,
            })
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from(
        "method,n_obs,count,alpha_mean,alpha_stderr,lpp_mean,lpp_stderr,nmse_mean,nmse_stderr\n",
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.method.slug(),
            r.n_obs,
            r.count,
            r.alpha.mean,
            r.alpha.stderr,
            r.lpp.mean,
            r.lpp.stderr,
            r.nmse.mean,
            r.nmse.stderr
        );
    }
    s
}

/// α, LPP and NMSE against `N_obs` (log axis), one line per method.
pub fn summary_svg(task: &str, rows: &[SummaryRow]) -> String {
    let mut methods: Vec<Method> = rows.iter().map(|r| r.method).collect();
    methods.dedup();
    let metric = |title: &str, y: &str, pick: fn(&SummaryRow) -> Stat, zero_line: bool| {
        let mut p = LinePlot::new(&format!("{task}: {title}"), "N_obs", y);
        p.log_x = true;
        for &m in &methods {
            let rs: Vec<&SummaryRow> = rows.iter().filter(|r| r.method == m).collect();
            let pts = rs.iter().map(|r| (r.n_obs as f64, pick(r).mean)).collect();
            let errs = rs.iter().map(|r| pick(r).stderr).collect();
            let mut s = Series::line(&m.to_string(), pts).with_errors(errs);
            s.dashed = m.error_model().is_none();
            p.series.push(s);
        }
        if zero_line {
            let xs: Vec<f64> = rows.iter().map(|r| r.n_obs as f64).collect();
            let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if lo.is_finite() {
                p.series.push(Series::dashed("calibrated", vec![(lo, 0.0), (hi, 0.0)]));
            }
        }
        p
    };
    panels(&[
        metric("calibration", "α", |r| r.alpha, true),
        metric("log posterior probability", "LPP", |r| r.lpp, false),
        metric("normalized MSE", "NMSE", |r| r.nmse, false),
    ])
}

/// Writes the cell table, the summary table and the plot panels.
pub fn write_sweep_outputs(out: &Path, task: &str, cells: &[CellResult]) -> Result<Vec<SummaryRow>> {
    fs::create_dir_all(out)?;
    let rows = aggregate(cells);
    fs::write(out.join(SWEEP_CSV), cells_csv(cells))?;
    fs::write(out.join(SUMMARY_CSV), summary_csv(&rows))?;
    fs::write(out.join(SWEEP_SVG), summary_svg(task, &rows))?;
    Ok(rows)
}

/// Paths of one cell inside a sweep directory.
pub fn cell_paths(out: &Path, method: Method, n_obs: usize, seed: u64) -> RunPaths {
    let shared = out.join(format!("seed-{seed}"));
    RunPaths {
        run: shared.join(method.slug()).join(format!("nobs-{n_obs}")),
        shared,
    }
}

fn read_cell(metrics_dir: &Path) -> Result<(f64, f64, f64)> {
    let vals: BTreeMap<String, f64> = MetricReport::read_scalars(&metrics_dir.join("metrics.csv"))?.into_iter().collect();
    let get = |k: &str| {
        vals.get(k).copied().ok_or_else(|| Error::Format {
            path: metrics_dir.join("metrics.csv"),
            reason: format!("missing {k}"),
        })
    };
    Ok((get("alpha")?, get("lpp")?, get("nmse")?))
}

/// Runs every `(seed, method, N_obs)` cell of `cfg.sweep` into `out`.
///
/// Simulation-only stages are shared per seed. A failing cell is recorded
/// with its error and the sweep moves on. Without `resume`, manifests
/// are cleared once up front.
pub fn run_sweep(cfg: &RunConfig, out: &Path, resume: bool) -> Result<Vec<CellResult>> {
    let sw = &cfg.sweep;
    if sw.n_obs.is_empty() || sw.methods.is_empty() || sw.seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one N_obs, method and seed".into()));
    }
    fs::create_dir_all(out)?;
    fs::write(out.join("config.toml"), cfg.to_toml())?;
    let mut cells = Vec::new();
    for &seed in &sw.seeds {
        if !resume {
            for p in walk_manifests(&out.join(format!("seed-{seed}"))) {
                RunManifest::clear(&p)?;
            }
        }
        for &method in &sw.methods {
            for &n_obs in &sw.n_obs {
                let mut c = cfg.clone();
                c.method = method;
                c.n_obs = n_obs;
                c.seed = seed;
                c.stages = Default::default();
                let paths = cell_paths(out, method, n_obs, seed);
                log::info!("sweep cell: {method}, N_obs = {n_obs}, seed {seed}");
                let result = run_pipeline(&c, &paths, Target::Evaluate, true).and_then(|o| {
                    let dir = o.metrics_dir.ok_or_else(|| Error::Config("evaluation did not run".into()))?;
                    read_cell(&dir)
                });
                let cell = match result {
                    Ok((alpha, lpp, nmse)) => CellResult {
                        method,
                        n_obs,
                        seed,
                        status: "ok".into(),
                        alpha,
                        lpp,
                        nmse,
                    },
                    Err(e) => {
                        log::error!("cell {method} N_obs = {n_obs} seed {seed} failed: {e}");
                        CellResult {
                            method,
                            n_obs,
                            seed,
                            status: format!("failed: {e}"),
                            alpha: f64::NAN,
                            lpp: f64::NAN,
                            nmse: f64::NAN,
                        }
                    }
                };
                cells.push(cell);
                // keep partial results on disk as the sweep progresses
                write_sweep_outputs(out, cfg.task.name(), &cells)?;
            }
        }
    }
    Ok(cells)
}

fn walk_manifests(dir: &Path) -> Vec<PathBuf> {
    walkdir::WalkDir::new(dir)
        .into_iter()
        .flatten()
        .filter(|e| e.file_type().is_dir() && RunManifest::path(e.path()).exists())
        .map(|e| e.into_path())
        .collect()
}

/// Re-renders tables and plots from a finished sweep or run directory,
/// returning a short text summary.
pub fn report(dir: &Path) -> Result<String> {
    let sweep = dir.join(SWEEP_CSV);
    let mut text = String::new();
    if sweep.exists() {
        let cells = parse_cells_csv(&fs::read_to_string(&sweep)?, &sweep)?;
        let task = RunConfig::load(&dir.join("config.toml"))
            .map(|c| c.task.name().to_string())
            .unwrap_or_else(|_| "sweep".into());
        let rows = write_sweep_outputs(dir, &task, &cells)?;
        let failed = cells.iter().filter(|c| !c.ok()).count();
        let _ = writeln!(text, "{} cells ({failed} failed)", cells.len());
        let _ = writeln!(text, "{:<14} {:>7} {:>4} {:>16} {:>16} {:>16}", "method", "N_obs", "n", "alpha", "LPP", "NMSE");
        for r in &rows {
            let f = |s: Stat| format!("{:.4} ± {:.4}", s.mean, s.stderr);
            let _ = writeln!(
                text,
                "{:<14} {:>7} {:>4} {:>16} {:>16} {:>16}",
                r.method.to_string(),
                r.n_obs,
                r.count,
                f(r.alpha),
                f(r.lpp),
                f(r.nmse)
            );
        }
        return Ok(text);
    }
    let metrics = dir.join("metrics");
    let mut found = false;
    if let Ok(entries) = fs::read_dir(&metrics) {
        let mut names: Vec<PathBuf> = entries.flatten().map(|e| e.path()).collect();
        names.sort();
        for p in names {
            if let Ok((a, l, n)) = read_cell(&p) {
                found = true;
                let name = p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                let _ = writeln!(text, "{name}: alpha = {a:.4}, LPP = {l:.4}, NMSE = {n:.4}");
            }
        }
    }
    if !found {
        return Err(Error::Config(format!("no sweep or metrics found in {}", dir.display())));
    }
    Ok(text)
}

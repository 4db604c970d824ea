//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! `cargo test --release --test acceptance` runs everything; trailing
//! criterion numbers (`-- 1 4 7`) select a subset. Criteria 5 and 6 train
//! full pendulum pipelines and take tens of minutes.

// negated comparisons double as NaN checks
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

mod common;

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rvnp::errormodel::{ErrorModel, ErrorModelKind};
use rvnp::flows::{ConditionalFlow, FlowArch};
use rvnp::metrics::{hdr_contains, hdr_rank, lpp, nmse, GaussianPosterior};
use rvnp::networks::VARIANCE_FLOOR;
use rvnp::numcore::{
    cholesky, cov_diag_plus_lowrank, cov_from_cholesky, gaussian_logpdf, gaussian_logpdf_rows, grad_check, logsumexp,
    Matrix, RngState, Tape, Var, LN_2PI,
};
use rvnp::objectives::{rvnp_loss, DensityTarget, ParamSpace, Prior, RvnpLossConfig};
use rvnp::pipeline::{aggregate, run_pipeline, run_sweep, Method, RunConfig, RunPaths, Standardizer, Target};
use rvnp::simulators::cs::{self, CellField, CellKind};
use rvnp::simulators::linear::LinearGaussianConfig;
use rvnp::simulators::sir::{self, weekend_transfer, SirConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

// ---- 1. numerics --------------------------------------------------------

type Primitive = (&'static str, usize, Box<dyn Fn(&Tape, Var) -> rvnp::Result<Var>>);

/// Every tape primitive, each wrapped so the checked scalar depends on all
/// of its inputs nontrivially.
fn primitives() -> Vec<Primitive> {
    let mut rng = RngState::new(77);
    let w34 = rng.normal_matrix(3, 4);
    let w31 = rng.normal_matrix(3, 1);
    let w32 = rng.normal_matrix(3, 2);
    // weighted sum keeps gradients from collapsing to all-ones
    fn weighted(t: &Tape, y: Var, w: &Matrix) -> Var {
        t.sum(t.mul(y, t.constant(w.clone())))
    }
    let unary = |name: &'static str, f: fn(&Tape, Var) -> Var, w: Matrix| -> Primitive {
        (
            name,
            12,
            Box::new(move |t: &Tape, x: Var| {
                let m = t.reshape(x, 3, 4);
                Ok(weighted(t, f(t, m), &w))
            }),
        )
    };
    let mut v: Vec<Primitive> = vec![
        unary("relu", |t, x| t.relu(x), w34.clone()),
        unary("gelu", |t, x| t.gelu(x), w34.clone()),
        unary("softplus", |t, x| t.softplus(x), w34.clone()),
        unary("tanh", |t, x| t.tanh(x), w34.clone()),
        unary("exp", |t, x| t.exp(x), w34.clone()),
        unary("ln", |t, x| t.ln(t.exp(x)), w34.clone()),
        unary("square", |t, x| t.square(x), w34.clone()),
        unary("affine", |t, x| t.affine(x, -1.7, 0.3), w34.clone()),
        unary("scale", |t, x| t.scale(x, 2.5), w34.clone()),
        unary("neg", |t, x| t.neg(x), w34.clone()),
        unary("sigmoid", |t, x| t.unary(x, rvnp::numcore::Unary::Sigmoid), w34.clone()),
        unary("select_cols", |t, x| t.select_cols(x, &[3, 0, 0, 2]), w34.clone()),
        unary("slice_cols", |t, x| t.square(t.slice_cols(x, 1, 3)), w32.clone()),
        unary("concat_cols", |t, x| t.concat_cols(t.slice_cols(x, 0, 1), t.square(x)), rng.normal_matrix(3, 5)),
        unary("repeat_rows", |t, x| t.square(t.repeat_rows(x, 2)), rng.normal_matrix(6, 4)),
        unary("sum_cols", |t, x| t.square(t.sum_cols(x)), w31.clone()),
        unary("sum", |t, x| t.square(t.sum(x)), Matrix::filled(1, 1, 0.7)),
        unary("mean", |t, x| t.square(t.mean(x)), Matrix::filled(1, 1, 0.7)),
        unary("group_mean", |t, x| t.square(t.group_mean(t.reshape(x, 6, 2), 3)), rng.normal_matrix(2, 2)),
        unary("group_logsumexp", |t, x| t.group_logsumexp(t.reshape(x, 12, 1), 4), w31.clone()),
        unary("adaptive_avg_pool", |t, x| t.square(t.adaptive_avg_pool(t.reshape(x, 6, 2), 6, 4)), rng.normal_matrix(4, 2)),
        unary("reshape", |t, x| t.square(t.reshape(x, 2, 6)), rng.normal_matrix(2, 6)),
    ];
    let b = rng.normal_matrix(1, 4);
    v.push((
        "add/sub/mul broadcast",
        16,
        Box::new(move |t: &Tape, x: Var| {
            let m = t.reshape(t.slice_cols(x, 0, 12), 3, 4);
            let r = t.slice_cols(x, 12, 16);
            let y = t.mul(t.add(m, r), t.sub(m, t.constant(b.clone())));
            Ok(t.sum(t.mul(y, r)))
        }),
    ));
    v.push((
        "linear",
        3 * 4 + 4 * 2 + 2,
        Box::new(move |t: &Tape, x: Var| {
            let xs = t.reshape(t.slice_cols(x, 0, 12), 3, 4);
            let w = t.reshape(t.slice_cols(x, 12, 20), 4, 2);
            let bias = t.slice_cols(x, 20, 22);
            Ok(t.sum(t.tanh(t.linear(xs, w, Some(bias)))))
        }),
    ));
    v.push((
        "gaussian_logpdf_rows",
        2 * 2 + 2 * 2 + 2 + 1,
        Box::new(|t: &Tape, x: Var| {
            let xs = t.reshape(t.slice_cols(x, 0, 4), 2, 2);
            let mean = t.reshape(t.slice_cols(x, 4, 8), 2, 2);
            let diag = t.affine(t.softplus(t.reshape(t.slice_cols(x, 8, 10), 1, 2)), 1.0, 0.1);
            let cov = cov_from_cholesky(t, diag, t.slice_cols(x, 10, 11));
            Ok(t.sum(gaussian_logpdf_rows(t, xs, mean, cov)?))
        }),
    ));
    v.push((
        "cov_diag_plus_lowrank",
        2 * 3 + 3,
        Box::new(|t: &Tape, x: Var| {
            let diag = t.affine(t.softplus(t.reshape(t.slice_cols(x, 0, 6), 2, 3)), 1.0, 0.1);
            let cov = cov_diag_plus_lowrank(t, diag, t.slice_cols(x, 6, 9));
            Ok(t.sum(t.square(cov)))
        }),
    ));
    v
}

fn numerics() -> Outcome {
    ensure!(ok(logsumexp(&[3.5]))? == 3.5, "logsumexp of one value");
    ensure!((ok(logsumexp(&[0.0, 0.0]))? - std::f64::consts::LN_2).abs() < 1e-15, "logsumexp(0, 0)");
    let big = ok(logsumexp(&[1000.0, 1000.0]))?;
    ensure!((big - 1000.0 - std::f64::consts::LN_2).abs() < 1e-12, "logsumexp overflowed: {big}");
    ensure!(ok(logsumexp(&[f64::NEG_INFINITY, 0.0]))? == 0.0, "-inf must carry no mass");
    ensure!(ok(logsumexp(&[f64::NEG_INFINITY; 3]))? == f64::NEG_INFINITY, "all -inf");
    ensure!(logsumexp(&[]).is_err(), "empty logsumexp accepted");

    let l = ok(cholesky(&Matrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 3.0]])))?;
    let want = [2.0, 0.0, 1.0, 2f64.sqrt()];
    ensure!(
        l.lower().as_slice().iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-12),
        "Cholesky of [[4,2],[2,3]] = {:?}",
        l.lower()
    );
    ensure!(
        cholesky(&Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]])).is_err(),
        "indefinite matrix factorized"
    );
    let mut rng = RngState::new(11);
    for _ in 0..20 {
        let b = rng.normal_matrix(5, 5);
        let mut spd = b.matmul(&b.transpose());
        for i in 0..5 {
            spd[(i, i)] += 0.5;
        }
        let f = ok(cholesky(&spd))?;
        ensure!(f.covariance().sub(&spd).frobenius_norm() < 1e-10, "L Lᵀ does not reconstruct");
    }

    // closed-form 2-D density
    let cov = Matrix::from_rows(&[vec![2.0, 0.5], vec![0.5, 1.0]]);
    let (x, m) = ([0.3, -1.2], [1.0, 0.5]);
    let det: f64 = 2.0 * 1.0 - 0.25;
    let (d0, d1) = (x[0] - m[0], x[1] - m[1]);
    let quad = (1.0 * d0 * d0 - 2.0 * 0.5 * d0 * d1 + 2.0 * d1 * d1) / det;
    let want = -LN_2PI - 0.5 * det.ln() - 0.5 * quad;
    let got = ok(gaussian_logpdf(&x, &m, &ok(cholesky(&cov))?))?;
    ensure!((got - want).abs() < 1e-12, "Gaussian log-pdf {got} vs {want}");

    let mut worst: (f64, &str) = (0.0, "");
    for (name, n, f) in primitives() {
        let mut r = RngState::new(name.len() as u64);
        // keep relu away from its kink
        let point: Vec<f64> = (0..n)
            .map(|_| {
                let v = r.normal();
                if v.abs() < 0.05 {
                    0.3
                } else {
                    v
                }
            })
            .collect();
        let e = ok(grad_check(|t, x| f(t, x), &point))?;
        ensure!(e < 1e-4, "{name}: finite-difference error {e:.2e}");
        if e > worst.0 {
            worst = (e, name);
        }
    }
    // the spline primitive, through a flow
    let flow = common::jittered_flow(common::small_arch(2, 1), 3, 0.3);
    let arch = flow.arch().clone();
    let data = Matrix::from_rows(&[vec![0.2, -0.4], vec![1.1, 0.5]]);
    let ctx = Matrix::from_rows(&[vec![0.3], vec![-0.8]]);
    let e = ok(grad_check(
        |t, p| {
            let f = arch.bind_from(t, p, 0);
            Ok(t.sum(f.log_prob(t, t.constant(data.clone()), t.constant(ctx.clone()))?))
        },
        flow.params(),
    ))?;
    ensure!(e < 1e-4, "spline flow: finite-difference error {e:.2e}");
    Ok(format!(
        "logsumexp/Cholesky/log-pdf oracles exact; {} primitives + spline, worst FD error {:.1e} ({})",
        primitives().len(),
        worst.0.max(e),
        worst.1
    ))
}

// ---- 2. flows -----------------------------------------------------------

fn flow_suite() -> Outcome {
    let mut worst: f64 = 0.0;
    for (d, c) in [(1, 2), (2, 3), (3, 1), (4, 4)] {
        let flow = common::jittered_flow(FlowArch::new(d, c), 5 + d as u64, 0.1);
        let mut rng = RngState::new(9);
        let u = rng.normal_matrix(256, d).scale(2.0);
        let ctx = rng.normal_matrix(256, c);
        let (x, ld_f) = ok(flow.forward(&u, &ctx))?;
        let (back, ld_i) = ok(flow.inverse(&x, &ctx))?;
        for (a, b) in back.as_slice().iter().zip(u.as_slice()) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in ld_f.iter().zip(&ld_i) {
            worst = worst.max((a + b).abs());
        }
    }
    ensure!(worst < 1e-8, "round trip error {worst:.2e}");

    let flow = common::jittered_flow(FlowArch::new(1, 1), 21, 0.1);
    let n = 20_000;
    let (lo, hi) = (-12.0, 12.0);
    let h = (hi - lo) / n as f64;
    let xs: Vec<f64> = (0..=n).map(|i| lo + i as f64 * h).collect();
    let lp = ok(flow.log_prob(&Matrix::col_vector(&xs), &Matrix::filled(xs.len(), 1, 0.7)))?;
    let mass: f64 = lp.windows(2).map(|w| 0.5 * h * (w[0].exp() + w[1].exp())).sum();
    ensure!((mass - 1.0).abs() < 0.01, "1-D density integrates to {mass}");

    let fresh = ok(ConditionalFlow::new(FlowArch::new(3, 2), &mut RngState::new(0)))?;
    let mut rng = RngState::new(1);
    let u = rng.normal_matrix(64, 3);
    let ctx = rng.normal_matrix(64, 2);
    let (x, ld) = ok(fresh.forward(&u, &ctx))?;
    // identity up to floating-point rounding of the uniform-bin spline
    let ident = x.sub(&u).as_slice().iter().chain(&ld).fold(0.0f64, |m, v| m.max(v.abs()));
    ensure!(ident < 1e-12, "fresh flow moves points by {ident:.2e}");

    let flow = common::jittered_flow(FlowArch::new(2, 1), 2, 0.5);
    let u = Matrix::from_rows(&[vec![12.0, -30.0], vec![10.5, 11.0], vec![-10.0001, 1e3]]);
    let ctx = Matrix::from_rows(&[vec![0.3], vec![-1.0], vec![2.0]]);
    let (x, ld) = ok(flow.forward(&u, &ctx))?;
    ensure!(x == u && ld == vec![0.0; 3], "points beyond B = 10 moved");
    Ok(format!(
        "round trip {worst:.1e}; 1-D mass {mass:.5}; identity init within {ident:.1e}; tails exact"
    ))
}

// ---- 3. objectives --------------------------------------------------------

/// Plain nested Monte Carlo of the robust loss, one draw at a time.
fn brute_force_loss(
    post: &ConditionalFlow,
    lik: &ConditionalFlow,
    err: &ErrorModel,
    z: &Matrix,
    prior: &Prior,
    k: usize,
    m: usize,
    rng: &mut RngState,
) -> f64 {
    let mut total = 0.0;
    for zi in z.iter_rows() {
        let mut w = Vec::with_capacity(k);
        for _ in 0..k {
            let (theta, lq) = post.sample(zi, 1, rng).unwrap();
            let cov = err.error_cov(theta.row(0)).unwrap();
            let inner: Vec<f64> = (0..m)
                .map(|_| {
                    let (x, _) = lik.sample(theta.row(0), 1, rng).unwrap();
                    gaussian_logpdf(zi, x.row(0), &cov).unwrap()
                })
                .collect();
            let inner = logsumexp(&inner).unwrap() - (m as f64).ln();
            w.push(inner + prior.log_prob(theta.row(0)) - lq[0]);
        }
        total -= logsumexp(&w).unwrap() - (k as f64).ln();
    }
    total / z.rows() as f64
}

fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

fn objective_suite() -> Outcome {
    // (a) tape estimator vs brute-force nested Monte Carlo on a 2-D toy
    let post = common::jittered_flow(common::small_arch(2, 2), 7, 0.1);
    let lik = common::jittered_flow(common::small_arch(2, 2), 8, 0.1);
    let err = common::jittered_error(ErrorModelKind::DiagNetPlusGlobal, 2, 2, 9);
    let prior = Prior::standard_normal(2);
    let space = ParamSpace::Direct { prior: prior.clone() };
    let z = Matrix::from_rows(&[vec![0.1, 0.4], vec![-0.7, 0.2], vec![1.2, -1.0]]);
    let cfg = RvnpLossConfig {
        k: 5,
        m: 3,
        log_prior_xi: None,
    };
    let reps = 400;
    let tape: Vec<f64> = (0..reps)
        .map(|s| rvnp_loss(&post, &lik, &err, &z, &space, &cfg, &mut RngState::new(1000 + s)).unwrap())
        .collect();
    let brute: Vec<f64> = (0..reps)
        .map(|s| brute_force_loss(&post, &lik, &err, &z, &prior, 5, 3, &mut RngState::new(5000 + s)))
        .collect();
    let ((mt, st), (mb, sb)) = (mean_se(&tape), mean_se(&brute));
    let se = st.hypot(sb);
    ensure!((mt - mb).abs() < 2.0 * se, "nested MC {mb:.4} vs estimator {mt:.4} (2 SE = {:.4})", 2.0 * se);

    // (b) K = M = 1 is the ELBO on the same draws
    let one = RvnpLossConfig {
        k: 1,
        m: 1,
        log_prior_xi: None,
    };
    let got = ok(rvnp_loss(&post, &lik, &err, &z, &space, &one, &mut RngState::new(3)))?;
    let mut rng = RngState::new(3);
    let u = rng.normal_matrix(3, 2);
    let noise = rng.normal_matrix(3, 2);
    let (theta, log_q) = ok(post.sample_with_noise(&u, &z))?;
    let (x, _) = ok(lik.forward(&noise, &theta))?;
    let mut elbo = 0.0;
    for i in 0..3 {
        let cov = ok(err.error_cov(theta.row(i)))?;
        elbo += ok(gaussian_logpdf(z.row(i), x.row(i), &cov))? + prior.log_prob(theta.row(i)) - log_q[i];
    }
    let elbo_gap = (got + elbo / 3.0).abs();
    ensure!(elbo_gap < 1e-10, "K=M=1 differs from the ELBO by {elbo_gap:.2e}");

    // (c) IWAE monotonicity on the conjugate task with trained flows
    let task = LinearGaussianConfig::default();
    let lg_prior = ok(task.prior())?;
    let mut rng = RngState::new(21);
    let th = lg_prior.sample_matrix(4000, &mut rng);
    let mut xs = Matrix::zeros(4000, 1);
    for i in 0..4000 {
        xs.row_mut(i).copy_from_slice(&task.simulate(th.row(i), &mut rng));
    }
    let q = common::fit_flow(DensityTarget::Posterior, common::small_arch(1, 1), &th, &xs, 30, 1);
    let p = common::fit_flow(DensityTarget::Likelihood, common::small_arch(1, 1), &th, &xs, 30, 2);
    let e1 = ErrorModel::new(ErrorModelKind::GlobalCholesky, 1, 1, &mut RngState::new(0));
    let lg_space = ParamSpace::Direct { prior: lg_prior.clone() };
    let bound = |k: usize, seed: u64| -> f64 {
        let mut r = RngState::new(seed);
        let t = lg_prior.sample_matrix(20, &mut r);
        let mut z = Matrix::zeros(20, 1);
        for i in 0..20 {
            z.row_mut(i).copy_from_slice(&task.simulate(t.row(i), &mut r));
        }
        let c = RvnpLossConfig {
            k,
            m: 8,
            log_prior_xi: None,
        };
        -rvnp_loss(&q, &p, &e1, &z, &lg_space, &c, &mut r.split_named("loss")).unwrap()
    };
    let seeds: Vec<u64> = (0..200).collect();
    let b: Vec<[f64; 3]> = seeds.iter().map(|&s| [bound(1, s), bound(5, s), bound(30, s)]).collect();
    // one-sided paired t-test, critical t(0.99, 199) = 2.345
    let mut ts = vec![];
    for (lo, hi) in [(0, 1), (1, 2)] {
        let d: Vec<f64> = b.iter().map(|r| r[hi] - r[lo]).collect();
        let (m, se) = mean_se(&d);
        let t = m / se;
        ensure!(t > 2.345, "bound not increasing from column {lo} to {hi}: mean Δ {m:.4}, t = {t:.2}");
        ts.push(t);
    }

    // (d) the frozen likelihood carries no gradient
    let t = Tape::new();
    let theta = t.constant(Matrix::from_rows(&[vec![0.2, 0.1]]));
    let xsim = ok(rvnp::objectives::LikelihoodSampler::sample_on_tape(&lik, &t, theta, &Matrix::zeros(1, 2)))?;
    ensure!(!t.requires_grad(xsim), "likelihood output depends on trainable parameters");
    let before = lik.params().to_vec();
    let obj = rvnp::objectives::RvnpObjective {
        posterior: post.arch().clone(),
        error: err.arch().clone(),
        likelihood: &lik,
        z_obs: z.clone(),
        space: space.clone(),
        cfg: RvnpLossConfig::default(),
    };
    let mut params = post.params().to_vec();
    params.extend_from_slice(err.params());
    let (_, g) = ok(rvnp::networks::Objective::chunk(&obj, &params, &[0, 1, 2], &mut RngState::new(0), true))?;
    let g = g.ok_or("no gradient returned")?;
    ensure!(g.len() == params.len(), "gradient covers {} parameters, expected {}", g.len(), params.len());
    ensure!(lik.params() == &before[..], "likelihood parameters changed");
    Ok(format!(
        "nested MC {mb:.4} vs {mt:.4} (±{:.4}); ELBO gap {elbo_gap:.1e}; IWAE paired t = {:.1}, {:.1}; no leakage",
        2.0 * se,
        ts[0],
        ts[1]
    ))
}

// ---- 4. calibration oracle ------------------------------------------------

const LINEAR_NPE: &str = r#"
version = 1
method = "npe"
seed = 0
n_sim = 20000
n_obs = 10
n_test = 500
export_csv = false

[task]
name = "linear-gaussian"

[npe.train]
iterations = 60
patience = 15

[evaluation]
samples = 2000
"#;

fn calibration_oracle() -> Outcome {
    let cfg = common::config(LINEAR_NPE);
    let dir = common::scratch("acceptance-calibration");
    ok(run_pipeline(&cfg, &RunPaths::single(&dir), Target::Evaluate, false))?;
    let (alpha, _, _) = common::metrics(&dir, Method::Npe);
    let curve = ok(fs::read_to_string(dir.join("metrics/npe/coverage.csv")))?;
    let mut worst: f64 = 0.0;
    for line in curve.lines().skip(1) {
        let (g, e) = line.split_once(',').ok_or("bad coverage.csv")?;
        let (g, e): (f64, f64) = (g.parse().map_err(|_| "bad γ")?, e.parse().map_err(|_| "bad EPC")?);
        worst = worst.max((e - g).abs());
    }
    ensure!(alpha.abs() < 0.05, "|α| = {:.4}", alpha.abs());
    ensure!(worst < 0.05, "max |EPC − γ| = {worst:.4}");
    Ok(format!("α = {alpha:.4}, max |EPC − γ| = {worst:.4}"))
}

// ---- 5, 6. pendulum -------------------------------------------------------

/// The pendulum schedule shared by criteria 5 and 6.
fn pendulum_config(dt_obs: f64, n_obs: usize) -> RunConfig {
    common::config(&format!(
        r#"
version = 1
method = "rvnp"
seed = 0
n_sim = 20000
n_obs = {n_obs}
n_test = 500
export_csv = false

[task]
name = "pendulum"
dt_obs = {dt_obs}

[encoder.train]
iterations = 40
patience = 10

[npe.train]
iterations = 150
patience = 20

[nle.train]
iterations = 150
patience = 20

[variational]
inner_samples = 8

[variational.train]
iterations = 150
patience = 30
importance_samples = 30

[variational.posterior_adam]
warmup_steps = 50

[variational.error_adam]
lr = 1e-2
warmup_steps = 50

[evaluation]
samples = 1000
"#
    ))
}

/// Mean error-model variance over the test parameters.
fn mean_error_variance(dir: &Path, cfg: &RunConfig) -> Result<f64, String> {
    let em = ok(ErrorModel::load(&dir.join("error-model.ckpt")))?;
    let test = ok(rvnp::simulators::DataFile::load(&dir.join("data/z-test.bin")))?;
    let theta = ok(test.require("theta", &dir.join("data/z-test.bin")))?;
    let prior = ok(cfg.task.prior())?;
    let scaler = ok(Standardizer::affine(prior.mean(), prior.std()))?;
    let std_prior = prior.affine_image(&prior.mean(), &prior.std());
    let v = ok(ParamSpace::for_prior(&std_prior).from_theta(&ok(scaler.apply(&theta))?))?;
    let mut total = 0.0;
    for row in v.iter_rows() {
        let var = ok(em.variances(row))?;
        total += var.iter().sum::<f64>() / var.len() as f64;
    }
    Ok(total / v.rows() as f64)
}

fn well_specified_collapse() -> Outcome {
    let dir = common::scratch("acceptance-collapse");
    let mut cfg = pendulum_config(0.05, 500);
    let paths = RunPaths::single(&dir);
    cfg.method = Method::Npe;
    ok(run_pipeline(&cfg, &paths, Target::Evaluate, false))?;
    cfg.method = Method::Rvnp;
    ok(run_pipeline(&cfg, &paths, Target::Evaluate, true))?;
    let (a_npe, _, _) = common::metrics(&dir, Method::Npe);
    let (a_rvnp, _, _) = common::metrics(&dir, Method::Rvnp);
    let var = mean_error_variance(&dir, &cfg)?;
    let summary = format!(
        "α_NPE = {a_npe:.4}, α_RVNP = {a_rvnp:.4}, mean error variance {var:.2e} ({:.0}× floor)",
        var / VARIANCE_FLOOR
    );
    ensure!(var <= 10.0 * VARIANCE_FLOOR, "{summary}: variance above 10× floor");
    ensure!((a_rvnp - a_npe).abs() < 0.05, "{summary}: |Δα| = {:.4}", (a_rvnp - a_npe).abs());
    Ok(summary)
}

fn misspecification_robustness() -> Outcome {
    let dir = common::scratch("acceptance-robustness");
    let mut cfg = pendulum_config(0.075, 1000);
    cfg.sweep.n_obs = vec![10, 100, 1000];
    cfg.sweep.methods = vec![Method::Npe, Method::Rvnp];
    cfg.sweep.seeds = vec![0, 1, 2];
    let cells = ok(run_sweep(&cfg, &dir, false))?;
    let failed: Vec<String> = cells.iter().filter(|c| !c.ok()).map(|c| c.status.clone()).collect();
    ensure!(failed.is_empty(), "failed cells: {failed:?}");
    let rows = aggregate(&cells);
    let get = |m: Method, n: usize| {
        rows.iter()
            .find(|r| r.method == m && r.n_obs == n)
            .unwrap_or_else(|| panic!("missing {m} at {n}"))
    };
    let mut line = String::new();
    for n in [10, 100, 1000] {
        let (a, b) = (get(Method::Npe, n), get(Method::Rvnp, n));
        line += &format!(
            "[N_obs {n}: α {:.3}/{:.3}, LPP {:.2}/{:.2}, NMSE {:.4}/{:.4}] ",
            a.alpha.mean, b.alpha.mean, a.lpp.mean, b.lpp.mean, a.nmse.mean, b.nmse.mean
        );
    }
    let line = format!("NPE/RVNP {}", line.trim_end());
    for n in [10, 100, 1000] {
        ensure!(get(Method::Npe, n).alpha.mean < -0.1, "(a) NPE not overconfident at {n}; {line}");
    }
    for n in [100, 1000] {
        let (a, b) = (get(Method::Npe, n), get(Method::Rvnp, n));
        ensure!(b.alpha.mean.abs() < a.alpha.mean.abs(), "(b) |α| not reduced at {n}; {line}");
    }
    let (a, b) = (get(Method::Npe, 1000), get(Method::Rvnp, 1000));
    ensure!(b.lpp.mean > a.lpp.mean, "(c) LPP not improved; {line}");
    ensure!(b.nmse.mean <= a.nmse.mean, "(d) NMSE worse; {line}");
    Ok(line)
}

// ---- 7, 8. simulators -----------------------------------------------------

fn sir_arithmetic() -> Outcome {
    let mut s = vec![0.0, 0.0, 0.0, 0.0, 0.0, 100.0, 100.0, 50.0];
    weekend_transfer(&mut s, 0.05);
    ensure!(s[5..] == [95.0, 95.0, 60.0], "weekend example gave {:?}", &s[5..]);

    let cfg = SirConfig::default();
    let prior = ok(cfg.prior())?;
    let mut rng = RngState::new(4);
    for _ in 0..200 {
        let theta = prior.sample(&mut rng);
        let series = cfg.series(&theta, &mut rng);
        let mut moved = series.clone();
        weekend_transfer(&mut moved, cfg.weekend_shift);
        ensure!(
            series.iter().sum::<f64>() == moved.iter().sum::<f64>(),
            "total changed for θ = {theta:?}"
        );
    }

    let quiet = SirConfig { sigma: 0.0, ..cfg };
    let mut worst = 0;
    for &(b, g) in &[(0.3, 0.1), (0.5, 0.2), (0.9, 0.1), (0.2, 0.05), (1.0, 0.45), (0.6, 0.3)] {
        let em = quiet.simulate(&[b, g], &mut RngState::new(0))[3] as usize;
        let oracle = rk4_peak_day(b, g, &quiet);
        worst = worst.max(em.abs_diff(oracle));
        ensure!(em.abs_diff(oracle) <= 1, "β={b} γ={g}: peak day {em} vs ODE {oracle}");
    }
    Ok(format!("(95, 95, 60) exact; totals conserved over 200 series; peak day within {worst} day(s)"))
}

/// Peak day of the deterministic SIR curve, RK4 with 1000 steps per day.
fn rk4_peak_day(beta: f64, gamma: f64, cfg: &SirConfig) -> usize {
    let f = |s: f64, i: f64| (-beta * s * i, beta * s * i - gamma * i, beta * s * i);
    let h = 1e-3;
    let (mut s, mut i) = (cfg.s0, cfg.i0);
    let mut daily = Vec::with_capacity(cfg.days);
    for _ in 0..cfg.days {
        let mut new = 0.0;
        for _ in 0..1000 {
            let k1 = f(s, i);
            let k2 = f(s + 0.5 * h * k1.0, i + 0.5 * h * k1.1);
            let k3 = f(s + 0.5 * h * k2.0, i + 0.5 * h * k2.1);
            let k4 = f(s + h * k3.0, i + h * k3.1);
            s += h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0);
            i += h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1);
            new += h / 6.0 * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2);
        }
        daily.push(new);
    }
    sir::summaries(&daily)[3] as usize
}

fn cs_monotonicity() -> Outcome {
    let prior = ok(cs::CsConfig::default().prior())?;
    let mut draws = RngState::new(8);
    let count = |v: &[CellKind]| v.iter().filter(|&&k| k == CellKind::Cancer).count();
    let (mut removed, mut noop) = (0usize, 0usize);
    for seed in 0..1000u64 {
        let theta = prior.sample(&mut draws);
        let base = RngState::new(seed);
        let field = CellField::sample(&theta, &mut base.clone());
        let well = count(&field.label(0.0));
        let mis = count(&field.label(0.5));
        ensure!(mis <= well, "seed {seed}: necrosis raised the cancer count {well} → {mis}");
        removed += well - mis;
        let a = cs::simulate(&theta, 0.0, &mut base.clone());
        let b = field.summaries(0.0, &mut base.clone().split_named("stromal"));
        ensure!(a == b, "seed {seed}: ρ_core = 0 changed the summaries");
        ensure!(field.label(0.0) == field.label(0.0), "labelling is not deterministic");
        noop += 1;
    }
    Ok(format!("1000 paired seeds: never increased ({removed} cells removed in total); ρ_core = 0 identical in {noop}"))
}

// ---- 9. metrics -----------------------------------------------------------

fn metric_self_tests() -> Outcome {
    let unit = GaussianPosterior::new(1, |_: &[f64]| vec![(0.0, 1.0)]);
    let r = ok(hdr_rank(&unit, &[0.0], &[0.674], 20_000, &mut RngState::new(0)))?;
    ensure!((r - 0.5).abs() < 0.02, "θ* = 0.674 has HDR rank {r}");
    let mut rng = RngState::new(1);
    ensure!(ok(hdr_contains(&unit, &[0.0], &[0.674], 0.6, 20_000, &mut rng))?, "not in the 60% HDR");
    ensure!(!ok(hdr_contains(&unit, &[0.0], &[0.674], 0.4, 20_000, &mut rng))?, "inside the 40% HDR");

    let theta = Matrix::from_rows(&[vec![0.3], vec![-0.2]]);
    let spot = GaussianPosterior::new(1, |x: &[f64]| vec![(x[0], 1e-12)]);
    let trivial = ok(nmse(&spot, &theta, &theta, &[1.0], 100, &RngState::new(0)))?.mean;
    ensure!(trivial < 1e-10, "NMSE of a point mass at the truth = {trivial}");

    let prior = ok(Prior::uniform(vec![0.0, -2.0], vec![1.0, 2.0]))?;
    let mid = Matrix::from_rows(&[vec![0.5, 0.0], vec![0.5, 0.0]]);
    let x = Matrix::zeros(2, 1);
    let l = ok(lpp(&prior, &mid, &x))?;
    ensure!((l + 4f64.ln()).abs() < 1e-12, "uniform LPP {l}");
    let s = 40_000;
    let u = ok(nmse(&prior, &mid, &x, &ok(prior.widths())?, s, &RngState::new(3)))?.mean;
    let oracle = (1.0f64 / 12.0).sqrt();
    // each coordinate's RMSE/width has sd about 0.15/sqrt(s)
    ensure!((u - oracle).abs() < 0.005, "uniform-prior NMSE {u} vs {oracle}");
    Ok(format!("HDR rank {r:.4}; point-mass NMSE {trivial:.1e}; uniform NMSE {u:.4} vs {oracle:.4}; LPP exact"))
}

// ---- 10. determinism and resume -------------------------------------------

const LINEAR_FULL: &str = r#"
version = 1
method = "rvnp-t"
seed = 3
n_sim = 3000
n_obs = 64
n_test = 64
export_csv = true

[task]
name = "linear-gaussian"
obs_shift = 1.0

[flow]
hidden = 16
layers = 2

[npe.train]
iterations = 4
batch_size = 256

[nle.train]
iterations = 4
batch_size = 256

[variational]
inner_samples = 2

[variational.train]
iterations = 3
importance_samples = 4

[tuning.train]
iterations = 3
batch_size = 256

[evaluation]
samples = 200
"#;

fn determinism_and_resume() -> Outcome {
    let cfg = common::config(LINEAR_FULL);
    let a = common::scratch("acceptance-determinism-a");
    let b = common::scratch("acceptance-determinism-b");
    let first = ok(run_pipeline(&cfg, &RunPaths::single(&a), Target::Evaluate, false))?;
    ok(run_pipeline(&cfg, &RunPaths::single(&b), Target::Evaluate, false))?;
    for f in ["metrics.csv", "coverage.csv", "coverage.svg"] {
        let (x, y) = (
            ok(fs::read(a.join("metrics/rvnp-t").join(f)))?,
            ok(fs::read(b.join("metrics/rvnp-t").join(f)))?,
        );
        ensure!(x == y, "{f} differs between identical runs");
    }
    let stamp = |p: &Path| fs::metadata(p).and_then(|m| m.modified()).ok();
    let ckpt = a.join("tuned-posterior.ckpt");
    let before = stamp(&ckpt);
    let again = ok(run_pipeline(&cfg, &RunPaths::single(&a), Target::Evaluate, true))?;
    ensure!(again.executed.is_empty(), "rerun executed {:?}", again.executed);
    ensure!(stamp(&ckpt) == before, "checkpoint rewritten on rerun");
    Ok(format!(
        "{} stages, byte-identical metrics; rerun executed nothing ({} skipped)",
        first.executed.len(),
        again.skipped.len()
    ))
}

// ---- driver ---------------------------------------------------------------

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "numerics suite", numerics),
        (2, "flow suite", flow_suite),
        (3, "objective suite", objective_suite),
        (4, "calibration oracle", calibration_oracle),
        (5, "well-specified collapse", well_specified_collapse),
        (6, "misspecification robustness", misspecification_robustness),
        (7, "SIR misspecification arithmetic", sir_arithmetic),
        (8, "CS monotonicity", cs_monotonicity),
        (9, "metric self-tests", metric_self_tests),
        (10, "pipeline determinism and resume", determinism_and_resume),
    ];
    // RUST_LOG=info shows stage progress
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = vec![];
    for (n, name, check) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let res = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match res {
            Ok(s) => println!("criterion {n:>2} PASS  {name} — {s} [{secs:.0} s]"),
            Err(e) => {
                println!("criterion {n:>2} FAIL  {name} — {e} [{secs:.0} s]");
                failed.push(n);
            }
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}

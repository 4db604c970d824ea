//! Monotone rational-quadratic spline on `[-B, B]`, identity outside.
//!
//! Each transformed coordinate is driven by `3K - 1` unconstrained values:
//! `K` bin widths and `K` bin heights (softmax-normalized so they sum to
//! `2B`) and `K - 1` interior knot derivatives (softplus-mapped). Boundary
//! derivatives are fixed at 1 so the spline joins the identity tails with
//! a continuous slope. All-zero raw values give uniform bins with unit
//! derivatives, i.e. the identity map.

use std::ops::{Add, Div, Mul, Sub};

use crate::numcore::special::{sigmoid, softplus, softplus_inv};
use crate::numcore::{CustomOp, Matrix, Tape, Var};
use crate::error::{Error, Result};

pub const MIN_BIN_WIDTH: f64 = 1e-3;
pub const MIN_BIN_HEIGHT: f64 = 1e-3;
pub const MIN_DERIVATIVE: f64 = 1e-3;

/// Raw values per transformed coordinate for `bins` bins.
pub fn params_per_dim(bins: usize) -> usize {
    3 * bins - 1
}

fn derivative_shift() -> f64 {
    softplus_inv(1.0 - MIN_DERIVATIVE)
}

/// Which way the spline is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplineDirection {
    /// Closed-form evaluation `y = g(x)`.
    Forward,
    /// Inverse via the quadratic root, `x = g⁻¹(y)`.
    Inverse,
}

/// Normalized knots for one coordinate.
#[derive(Clone, Debug)]
pub struct RqsKnots {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub derivs: Vec<f64>,
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

impl RqsKnots {
    pub fn from_raw(raw: &[f64], bins: usize, bound: f64) -> Self {
        debug_assert_eq!(raw.len(), params_per_dim(bins));
        let width_probs = softmax(&raw[..bins]);
        let height_probs = softmax(&raw[bins..2 * bins]);
        let cw = 2.0 * bound - MIN_BIN_WIDTH * bins as f64;
        let ch = 2.0 * bound - MIN_BIN_HEIGHT * bins as f64;
        let mut xs = Vec::with_capacity(bins + 1);
        let mut ys = Vec::with_capacity(bins + 1);
        xs.push(-bound);
        ys.push(-bound);
        for k in 0..bins {
            xs.push(xs[k] + MIN_BIN_WIDTH + cw * width_probs[k]);
            ys.push(ys[k] + MIN_BIN_HEIGHT + ch * height_probs[k]);
        }
        xs[bins] = bound;
        ys[bins] = bound;
        let shift = derivative_shift();
        let mut derivs = Vec::with_capacity(bins + 1);
        derivs.push(1.0);
        for &r in &raw[2 * bins..] {
            derivs.push(MIN_DERIVATIVE + softplus(r + shift));
        }
        derivs.push(1.0);
        Self {
            xs,
            ys,
            derivs,
        }
    }

    pub fn bins(&self) -> usize {
        self.xs.len() - 1
    }

    fn locate(knots: &[f64], v: f64) -> usize {
        // last k with knots[k] <= v, clamped to a valid bin
        let k = knots.partition_point(|&kx| kx <= v);
        k.saturating_sub(1).min(knots.len() - 2)
    }

    fn local(&self, k: usize) -> [f64; 6] {
        [
            self.xs[k],
            self.xs[k + 1] - self.xs[k],
            self.ys[k],
            self.ys[k + 1] - self.ys[k],
            self.derivs[k],
            self.derivs[k + 1],
        ]
    }
}

/// Forward-mode number with seven tangents:
/// `(x, x_k, w_k, y_k, h_k, δ_k, δ_{k+1})`.
#[derive(Clone, Copy, Debug)]
struct Dual {
    v: f64,
    d: [f64; 7],
}

impl Dual {
    fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; 7];
        d[slot] = 1.0;
        Self { v, d }
    }

    fn cst(v: f64) -> Self {
        Self { v, d: [0.0; 7] }
    }

    fn ln(self) -> Self {
        let inv = 1.0 / self.v;
        Self {
            v: self.v.ln(),
            d: self.d.map(|x| x * inv),
        }
    }

    fn scale(self, c: f64) -> Self {
        Self {
            v: self.v * c,
            d: self.d.map(|x| x * c),
        }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a += b;
        }
        Dual { v: self.v + o.v, d }
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        let mut d = self.d;
        for (a, b) in d.iter_mut().zip(o.d) {
            *a -= b;
        }
        Dual { v: self.v - o.v, d }
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        let mut d = [0.0; 7];
        for i in 0..7 {
            d[i] = self.d[i] * o.v + self.v * o.d[i];
        }
        Dual { v: self.v * o.v, d }
    }
}

impl Div for Dual {
    type Output = Dual;
    fn div(self, o: Dual) -> Dual {
        let inv = 1.0 / o.v;
        let q = self.v * inv;
        let mut d = [0.0; 7];
        for i in 0..7 {
            d[i] = (self.d[i] - q * o.d[i]) * inv;
        }
        Dual { v: q, d }
    }
}

/// `(g(x), log g'(x))` inside one bin, generic over plain and dual numbers.
fn bin_eval_dual(x: Dual, loc: [Dual; 6]) -> (Dual, Dual) {
    let [xk, w, yk, h, d0, d1] = loc;
    let one = Dual::cst(1.0);
    let s = h / w;
    let xi = (x - xk) / w;
    let omx = one - xi;
    let t = xi * omx;
    let den = s + (d1 + d0 - s.scale(2.0)) * t;
    let num = h * (s * xi * xi + d0 * t);
    let y = yk + num / den;
    let slope_num = d1 * xi * xi + (s * t).scale(2.0) + d0 * omx * omx;
    let logd = s.ln().scale(2.0) + slope_num.ln() - den.ln().scale(2.0);
    (y, logd)
}

fn bin_eval(x: f64, loc: [f64; 6]) -> (f64, f64) {
    let [xk, w, yk, h, d0, d1] = loc;
    let s = h / w;
    let xi = (x - xk) / w;
    let omx = 1.0 - xi;
    let t = xi * omx;
    let den = s + (d1 + d0 - 2.0 * s) * t;
    let y = yk + h * (s * xi * xi + d0 * t) / den;
    let slope_num = d1 * xi * xi + 2.0 * s * t + d0 * omx * omx;
    (y, 2.0 * s.ln() + slope_num.ln() - 2.0 * den.ln())
}

fn bin_invert(y: f64, loc: [f64; 6]) -> f64 {
    let [xk, w, yk, h, d0, d1] = loc;
    let s = h / w;
    let dy = y - yk;
    let c1 = d1 + d0 - 2.0 * s;
    let a = h * (s - d0) + dy * c1;
    let b = h * d0 - dy * c1;
    let c = -s * dy;
    let disc = (b * b - 4.0 * a * c).max(0.0);
    let xi = (2.0 * c / (-b - disc.sqrt())).clamp(0.0, 1.0);
    xk + xi * w
}

/// Scalar spline evaluation: returns the transformed value and the log of
/// the slope of the map in the requested direction.
pub fn rqs_scalar(v: f64, knots: &RqsKnots, bound: f64, dir: SplineDirection) -> (f64, f64) {
    if !(-bound..=bound).contains(&v) {
        return (v, 0.0);
    }
    match dir {
        SplineDirection::Forward => {
            let k = RqsKnots::locate(&knots.xs, v);
            bin_eval(v, knots.local(k))
        }
        SplineDirection::Inverse => {
            let k = RqsKnots::locate(&knots.ys, v);
            let loc = knots.local(k);
            let x = bin_invert(v, loc);
            let (_, logd) = bin_eval(x, loc);
            (x, -logd)
        }
    }
}

#[derive(Clone, Copy)]
struct ElemCache {
    bin: u32,
    tail: bool,
    dout_din: f64,
    dld_din: f64,
    dout_dloc: [f64; 6],
    dld_dloc: [f64; 6],
}

struct SplineOp {
    bins: usize,
    bound: f64,
    cache: Vec<ElemCache>,
}

impl CustomOp for SplineOp {
    fn name(&self) -> &'static str {
        "rqs_spline"
    }

    fn backward(
        &self,
        inputs: &[&Matrix],
        _output: &Matrix,
        grad: &Matrix,
        needs: &[bool],
    ) -> Vec<Option<Matrix>> {
        let (xv, pv) = (inputs[0], inputs[1]);
        let (rows, t) = xv.shape();
        let np = params_per_dim(self.bins);
        let mut gx = needs[0].then(|| Matrix::zeros(rows, t));
        let mut gp = needs[1].then(|| Matrix::zeros(rows, pv.cols()));
        let bins = self.bins;
        let cw = 2.0 * self.bound - MIN_BIN_WIDTH * bins as f64;
        let ch = 2.0 * self.bound - MIN_BIN_HEIGHT * bins as f64;
        let shift = derivative_shift();
        let mut gw = vec![0.0; bins];
        let mut gh = vec![0.0; bins];
        for i in 0..rows {
            let g_ld = grad[(i, t)];
            for j in 0..t {
                let c = &self.cache[i * t + j];
                let g_out = grad[(i, j)];
                if let Some(gx) = gx.as_mut() {
                    gx[(i, j)] = g_out * c.dout_din + g_ld * c.dld_din;
                }
                if c.tail {
                    continue;
                }
                let Some(gp) = gp.as_mut() else { continue };
                let raw = &pv.row(i)[j * np..(j + 1) * np];
                let wp = softmax(&raw[..bins]);
                let hp = softmax(&raw[bins..2 * bins]);
                let mut gl = [0.0; 6];
                for m in 0..6 {
                    gl[m] = g_out * c.dout_dloc[m] + g_ld * c.dld_dloc[m];
                }
                let k = c.bin as usize;
                // knot position is a prefix sum of widths/heights
                gw.iter_mut().for_each(|v| *v = 0.0);
                gh.iter_mut().for_each(|v| *v = 0.0);
                for q in 0..k {
                    gw[q] += gl[0];
                    gh[q] += gl[2];
                }
                gw[k] += gl[1];
                gh[k] += gl[3];
                let dst = &mut gp.row_mut(i)[j * np..(j + 1) * np];
                let dot_w: f64 = wp.iter().zip(&gw).map(|(p, g)| p * g).sum();
                let dot_h: f64 = hp.iter().zip(&gh).map(|(p, g)| p * g).sum();
                for q in 0..bins {
                    dst[q] = cw * wp[q] * (gw[q] - dot_w);
                    dst[bins + q] = ch * hp[q] * (gh[q] - dot_h);
                }
                if k >= 1 {
                    dst[2 * bins + k - 1] = gl[4] * sigmoid(raw[2 * bins + k - 1] + shift);
                }
                if k + 1 < bins {
                    dst[2 * bins + k] += gl[5] * sigmoid(raw[2 * bins + k] + shift);
                }
            }
        }
        vec![gx, gp]
    }
}

/// Applies the spline coordinatewise on the tape.
///
/// `x` is `r×t`, `params` is `r × t(3K−1)`. The output is `r×(t+1)`: the
/// transformed coordinates followed by the summed log-slope column.
pub fn rqs_transform(
    tape: &Tape,
    x: Var,
    params: Var,
    bins: usize,
    bound: f64,
    dir: SplineDirection,
) -> Result<Var> {
    tape.custom(&[x, params], |v, needs_grad| {
        let (xv, pv) = (v[0], v[1]);
        let (rows, t) = xv.shape();
        let np = params_per_dim(bins);
        if pv.shape() != (rows, t * np) {
            return Err(Error::arg(format!(
                "spline params {:?}, expected {:?}",
                pv.shape(),
                (rows, t * np)
            )));
        }
        let mut out = Matrix::zeros(rows, t + 1);
        let mut cache = if needs_grad {
            Vec::with_capacity(rows * t)
        } else {
            Vec::new()
        };
        for i in 0..rows {
            let mut ld_sum = 0.0;
            for j in 0..t {
                let val = xv[(i, j)];
                if !(-bound..=bound).contains(&val) {
                    out[(i, j)] = val;
                    if needs_grad {
                        cache.push(ElemCache {
                            bin: 0,
                            tail: true,
                            dout_din: 1.0,
                            dld_din: 0.0,
                            dout_dloc: [0.0; 6],
                            dld_dloc: [0.0; 6],
                        });
                    }
                    continue;
                }
                let knots = RqsKnots::from_raw(&pv.row(i)[j * np..(j + 1) * np], bins, bound);
                let (k, x_at) = match dir {
                    SplineDirection::Forward => (RqsKnots::locate(&knots.xs, val), val),
                    SplineDirection::Inverse => {
                        let k = RqsKnots::locate(&knots.ys, val);
                        (k, bin_invert(val, knots.local(k)))
                    }
                };
                let loc = knots.local(k);
                if !needs_grad {
                    let (y, logd) = bin_eval(x_at, loc);
                    match dir {
                        SplineDirection::Forward => {
                            out[(i, j)] = y;
                            ld_sum += logd;
                        }
                        SplineDirection::Inverse => {
                            out[(i, j)] = x_at;
                            ld_sum -= logd;
                        }
                    }
                    continue;
                }
                let dloc = [
                    Dual::var(loc[0], 1),
                    Dual::var(loc[1], 2),
                    Dual::var(loc[2], 3),
                    Dual::var(loc[3], 4),
                    Dual::var(loc[4], 5),
                    Dual::var(loc[5], 6),
                ];
                let (y, logd) = bin_eval_dual(Dual::var(x_at, 0), dloc);
                let mut ec = ElemCache {
                    bin: k as u32,
                    tail: false,
                    dout_din: 0.0,
                    dld_din: 0.0,
                    dout_dloc: [0.0; 6],
                    dld_dloc: [0.0; 6],
                };
                match dir {
                    SplineDirection::Forward => {
                        out[(i, j)] = y.v;
                        ld_sum += logd.v;
                        ec.dout_din = y.d[0];
                        ec.dld_din = logd.d[0];
                        ec.dout_dloc.copy_from_slice(&y.d[1..]);
                        ec.dld_dloc.copy_from_slice(&logd.d[1..]);
                    }
                    SplineDirection::Inverse => {
                        // x = g⁻¹(y): dx/dy = 1/g', dx/dp = -(∂g/∂p)/g'
                        out[(i, j)] = x_at;
                        ld_sum -= logd.v;
                        let gprime = y.d[0];
                        let dx_dy = 1.0 / gprime;
                        ec.dout_din = dx_dy;
                        ec.dld_din = -logd.d[0] * dx_dy;
                        for m in 0..6 {
                            let dx_dp = -y.d[m + 1] * dx_dy;
                            ec.dout_dloc[m] = dx_dp;
                            ec.dld_dloc[m] = -(logd.d[m + 1] + logd.d[0] * dx_dp);
                        }
                    }
                }
                cache.push(ec);
            }
            out[(i, t)] = ld_sum;
        }
        Ok((
            out,
            Box::new(SplineOp {
                bins,
                bound,
                cache,
            }) as Box<dyn CustomOp>,
        ))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, RngState};

    fn random_raw(rng: &mut RngState, bins: usize, scale: f64) -> Vec<f64> {
        (0..params_per_dim(bins)).map(|_| scale * rng.normal()).collect()
    }

    #[test]
    fn zero_params_are_identity() {
        let knots = RqsKnots::from_raw(&vec![0.0; params_per_dim(15)], 15, 10.0);
        for &v in &[-9.99, -3.3, 0.0, 0.123, 7.5] {
            let (y, ld) = rqs_scalar(v, &knots, 10.0, SplineDirection::Forward);
            assert!((y - v).abs() < 1e-13, "{y} vs {v}");
            assert!(ld.abs() < 1e-13);
        }
    }

    #[test]
    fn inverse_inverts_forward() {
        let mut rng = RngState::new(3);
        for _ in 0..20 {
            let knots = RqsKnots::from_raw(&random_raw(&mut rng, 15, 1.5), 15, 10.0);
            for _ in 0..20 {
                let x = rng.uniform_range(-10.0, 10.0);
                let (y, ld) = rqs_scalar(x, &knots, 10.0, SplineDirection::Forward);
                let (xb, ldb) = rqs_scalar(y, &knots, 10.0, SplineDirection::Inverse);
                assert!((xb - x).abs() < 1e-9, "{xb} vs {x}");
                assert!((ld + ldb).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn tails_are_identity() {
        let mut rng = RngState::new(4);
        let knots = RqsKnots::from_raw(&random_raw(&mut rng, 15, 2.0), 15, 10.0);
        for &v in &[-25.0, -10.0001, 10.5, 1e3] {
            for dir in [SplineDirection::Forward, SplineDirection::Inverse] {
                assert_eq!(rqs_scalar(v, &knots, 10.0, dir), (v, 0.0));
            }
        }
    }

    #[test]
    fn adjoints_match_finite_differences() {
        let bins = 5;
        let np = params_per_dim(bins);
        let mut rng = RngState::new(11);
        for dir in [SplineDirection::Forward, SplineDirection::Inverse] {
            for _ in 0..10 {
                let mut point = vec![rng.uniform_range(-2.5, 2.5), rng.uniform_range(-2.5, 2.5)];
                point.extend(random_raw(&mut rng, bins, 0.8));
                point.extend(random_raw(&mut rng, bins, 0.8));
                let weights = [0.7, -1.3, 0.4];
                let err = grad_check(
                    |t, p| {
                        let x = t.slice_cols(p, 0, 2);
                        let params = t.slice_cols(p, 2, 2 + 2 * np);
                        let out = rqs_transform(t, x, params, bins, 3.0, dir)?;
                        let w = t.constant(Matrix::row_vector(&weights));
                        Ok(t.sum(t.mul(out, w)))
                    },
                    &point,
                )
                .unwrap();
                assert!(err < 1e-6, "{dir:?}: err = {err}");
            }
        }
    }
}

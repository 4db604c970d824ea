use serde::{Deserialize, Serialize};

use super::spline::{params_per_dim, rqs_transform, SplineDirection};
use crate::error::{Error, Result};
use crate::networks::mlp::{collect_grads, Activation, BoundMlp, MlpSpec};
use crate::numcore::special::std_normal_logpdf;
use crate::numcore::{Gradients, Matrix, RngState, Tape, Var, LN_2PI};

/// Architecture header of a conditional spline flow.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowArch {
    pub event_dim: usize,
    pub context_dim: usize,
    pub layers: usize,
    pub bins: usize,
    pub tail_bound: f64,
    pub hidden: usize,
    pub hidden_layers: usize,
}

impl FlowArch {
    /// Five coupling layers, 15 bins, tail bound 10, conditioner width 52.
    pub fn new(event_dim: usize, context_dim: usize) -> Self {
        Self {
            event_dim,
            context_dim,
            layers: 5,
            bins: 15,
            tail_bound: 10.0,
            hidden: 52,
            hidden_layers: 2,
        }
    }

    /// `(identity, transformed)` coordinate sets of layer `l`.
    ///
    /// Masks alternate; when the event dimension is odd the larger half is
    /// transformed on even layers. One-dimensional events transform their
    /// only coordinate every layer with a context-only conditioner.
    pub fn mask(&self, l: usize) -> (Vec<usize>, Vec<usize>) {
        let d = self.event_dim;
        if d == 1 {
            return (vec![], vec![0]);
        }
        let h = d / 2;
        if l % 2 == 0 {
            ((0..h).collect(), (h..d).collect())
        } else {
            ((h..d).collect(), (0..h).collect())
        }
    }

    pub fn conditioner(&self, l: usize) -> MlpSpec {
        let (id, tr) = self.mask(l);
        let mut sizes = vec![id.len() + self.context_dim];
        sizes.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        sizes.push(tr.len() * params_per_dim(self.bins));
        MlpSpec::new(sizes, Activation::Relu)
    }

    pub fn num_params(&self) -> usize {
        (0..self.layers).map(|l| self.conditioner(l).num_params()).sum()
    }

    /// Binds conditioners to a flat `1×n` node starting at column `offset`.
    pub fn bind_from(&self, tape: &Tape, flat: Var, offset: usize) -> BoundFlow {
        let mut off = offset;
        let layers = (0..self.layers)
            .map(|l| {
                let spec = self.conditioner(l);
                let b = spec.bind_from(tape, flat, off);
                off += spec.num_params();
                b
            })
            .collect();
        BoundFlow {
            arch: self.clone(),
            layers,
        }
    }

    /// Weight-decay mask: spline slope outputs are scale parameters and are
    /// excluded.
    pub fn decay_mask(&self) -> Vec<bool> {
        let np = params_per_dim(self.bins);
        let slopes_from = 2 * self.bins;
        let mut mask = Vec::with_capacity(self.num_params());
        for l in 0..self.layers {
            let spec = self.conditioner(l);
            let shapes = spec.block_shapes();
            let last = shapes.len() - 2;
            for (b, &(r, c)) in shapes.iter().enumerate() {
                for _ in 0..r {
                    for j in 0..c {
                        // output column j belongs to spline slot j % np
                        let slope = b >= last && j % np >= slopes_from;
                        mask.push(!slope);
                    }
                }
            }
        }
        mask
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.event_dim == 0 || self.layers == 0 || self.bins < 2 || !(self.tail_bound > 0.0) {
            return Err(Error::arg(format!("invalid flow architecture {self:?}")));
        }
        Ok(())
    }
}

/// Conditional normalizing flow built from spline coupling layers over a
/// standard normal base.
///
/// The density direction maps data `x` through layers `0..L` to base noise
/// `u`; [`ConditionalFlow::forward`] goes the other way, `u → x`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionalFlow {
    arch: FlowArch,
    params: Vec<f64>,
}

impl ConditionalFlow {
    /// Fresh flow whose conditioners output zeros, i.e. the identity map.
    pub fn new(arch: FlowArch, rng: &mut RngState) -> Result<Self> {
        arch.validate()?;
        let mut params = Vec::with_capacity(arch.num_params());
        for l in 0..arch.layers {
            params.extend(arch.conditioner(l).init(rng, true));
        }
        Ok(Self { arch, params })
    }

    pub fn from_params(arch: FlowArch, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if params.len() != arch.num_params() {
            return Err(Error::arg(format!(
                "flow expects {} parameters, got {}",
                arch.num_params(),
                params.len()
            )));
        }
        Ok(Self { arch, params })
    }

    pub fn arch(&self) -> &FlowArch {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<f64>) {
        assert_eq!(params.len(), self.params.len(), "parameter count changed");
        self.params = params;
    }

    pub fn event_dim(&self) -> usize {
        self.arch.event_dim
    }

    pub fn context_dim(&self) -> usize {
        self.arch.context_dim
    }

    pub fn bind(&self, tape: &Tape, trainable: bool) -> BoundFlow {
        let mut off = 0;
        let layers = (0..self.arch.layers)
            .map(|l| {
                let spec = self.arch.conditioner(l);
                let n = spec.num_params();
                let bound = spec.bind(tape, &self.params[off..off + n], trainable);
                off += n;
                bound
            })
            .collect();
        BoundFlow {
            arch: self.arch.clone(),
            layers,
        }
    }

    /// Binds against a flat `1×n` parameter node (used for gradient checks
    /// and for models whose parameters are built on the tape).
    pub fn bind_from(&self, tape: &Tape, flat: Var) -> BoundFlow {
        self.arch.bind_from(tape, flat, 0)
    }

    /// Base → data: returns `x` and `log|det ∂x/∂u|` per row.
    pub fn forward(&self, u: &Matrix, context: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let tape = Tape::new();
        let f = self.bind(&tape, false);
        let (uv, cv) = (tape.constant(u.clone()), tape.constant(context.clone()));
        let (x, ld) = f.forward(&tape, uv, cv)?;
        let x = tape.value(x).clone();
        let ld = tape.value(ld).as_slice().to_vec();
        Ok((x, ld))
    }

    /// Data → base: returns `u` and `log|det ∂u/∂x|` per row.
    pub fn inverse(&self, x: &Matrix, context: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let tape = Tape::new();
        let f = self.bind(&tape, false);
        let (xv, cv) = (tape.constant(x.clone()), tape.constant(context.clone()));
        let (u, ld) = f.inverse(&tape, xv, cv)?;
        let u = tape.value(u).clone();
        let ld = tape.value(ld).as_slice().to_vec();
        Ok((u, ld))
    }

    /// `log p(x | context)` for each row.
    pub fn log_prob(&self, x: &Matrix, context: &Matrix) -> Result<Vec<f64>> {
        let (u, ld) = self.inverse(x, context)?;
        Ok(u.iter_rows().zip(ld).map(|(r, l)| std_normal_logpdf(r) + l).collect())
    }

    /// `n` draws for a single context row, with their log-densities.
    pub fn sample(&self, context: &[f64], n: usize, rng: &mut RngState) -> Result<(Matrix, Vec<f64>)> {
        if n == 0 {
            return Err(Error::arg("flow sample count must be at least 1"));
        }
        let ctx = Matrix::row_vector(context).repeat_rows(n);
        let u = rng.normal_matrix(n, self.event_dim());
        self.sample_with_noise(&u, &ctx)
    }

    /// Draws from given base noise, one per context row.
    pub fn sample_with_noise(&self, u: &Matrix, context: &Matrix) -> Result<(Matrix, Vec<f64>)> {
        let (x, ld) = self.forward(u, context)?;
        let lp = u.iter_rows().zip(ld).map(|(r, l)| std_normal_logpdf(r) - l).collect();
        Ok((x, lp))
    }
}

/// A flow whose parameters are registered on a tape.
pub struct BoundFlow {
    arch: FlowArch,
    layers: Vec<BoundMlp>,
}

fn check_finite(tape: &Tape, v: Var, what: &str, layer: usize) -> Result<()> {
    if tape.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::numeric(format!("flow layer {layer} ({what})")))
    }
}

impl BoundFlow {
    fn coupling(
        &self,
        tape: &Tape,
        l: usize,
        z: Var,
        context: Var,
        dir: SplineDirection,
    ) -> Result<(Var, Var)> {
        let (id, tr) = self.arch.mask(l);
        let z_id = tape.select_cols(z, &id);
        let z_tr = tape.select_cols(z, &tr);
        let cond_in = tape.concat_cols(z_id, context);
        let params = self.layers[l].forward(tape, cond_in);
        let out = rqs_transform(tape, z_tr, params, self.arch.bins, self.arch.tail_bound, dir)?;
        let y_tr = tape.slice_cols(out, 0, tr.len());
        let ld = tape.slice_cols(out, tr.len(), tr.len() + 1);
        // restore the original coordinate order
        let merged = tape.concat_cols(z_id, y_tr);
        let mut order = vec![0; self.arch.event_dim];
        for (pos, &c) in id.iter().chain(tr.iter()).enumerate() {
            order[c] = pos;
        }
        let z_next = tape.select_cols(merged, &order);
        check_finite(tape, z_next, "output", l)?;
        check_finite(tape, ld, "log-det", l)?;
        Ok((z_next, ld))
    }

    /// Data → base; returns `(u, log|det ∂u/∂x|)` with the log-det as `r×1`.
    pub fn inverse(&self, tape: &Tape, x: Var, context: Var) -> Result<(Var, Var)> {
        self.check_shapes(tape, x, context)?;
        let mut z = x;
        let mut total: Option<Var> = None;
        for l in 0..self.arch.layers {
            let (zn, ld) = self.coupling(tape, l, z, context, SplineDirection::Forward)?;
            z = zn;
            total = Some(match total {
                Some(t) => tape.add(t, ld),
                None => ld,
            });
        }
        Ok((z, total.expect("at least one layer")))
    }

    /// Base → data; returns `(x, log|det ∂x/∂u|)`.
    pub fn forward(&self, tape: &Tape, u: Var, context: Var) -> Result<(Var, Var)> {
        self.check_shapes(tape, u, context)?;
        let mut z = u;
        let mut total: Option<Var> = None;
        for l in (0..self.arch.layers).rev() {
            let (zn, ld) = self.coupling(tape, l, z, context, SplineDirection::Inverse)?;
            z = zn;
            total = Some(match total {
                Some(t) => tape.add(t, ld),
                None => ld,
            });
        }
        Ok((z, total.expect("at least one layer")))
    }

    /// `log p(x | context)` as an `r×1` node.
    pub fn log_prob(&self, tape: &Tape, x: Var, context: Var) -> Result<Var> {
        let (u, ld) = self.inverse(tape, x, context)?;
        let base = base_logpdf(tape, u, self.arch.event_dim);
        Ok(tape.add(base, ld))
    }

    /// Reparametrized draws `x = T(u)` and their log-densities.
    pub fn sample(&self, tape: &Tape, u: Var, context: Var) -> Result<(Var, Var)> {
        let (x, ld) = self.forward(tape, u, context)?;
        let base = base_logpdf(tape, u, self.arch.event_dim);
        Ok((x, tape.sub(base, ld)))
    }

    pub fn collect_grads(&self, tape: &Tape, grads: &Gradients) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            collect_grads(grads, l.vars(), tape, &mut out);
        }
        out
    }

    fn check_shapes(&self, tape: &Tape, x: Var, context: Var) -> Result<()> {
        let (xr, xc) = tape.shape(x);
        let (cr, cc) = tape.shape(context);
        if xc != self.arch.event_dim || cc != self.arch.context_dim || xr != cr {
            return Err(Error::arg(format!(
                "flow expects event {} / context {}, got {xr}x{xc} and {cr}x{cc}",
                self.arch.event_dim, self.arch.context_dim
            )));
        }
        Ok(())
    }
}

/// Row-wise standard normal log-density.
pub fn base_logpdf(tape: &Tape, u: Var, dim: usize) -> Var {
    let sq = tape.sum_cols(tape.square(u));
    tape.affine(sq, -0.5, -0.5 * LN_2PI * dim as f64)
}

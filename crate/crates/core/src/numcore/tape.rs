//! Recorded-operation reverse-mode differentiation over batched matrices.
//!
//! Every node holds a `rows × cols` value where rows index batch elements.
//! The primitive set is small on purpose: affine maps, elementwise
//! nonlinearities, broadcasting arithmetic, column/row plumbing, grouped
//! reductions (including a stable log-sum-exp), and [`CustomOp`] for the
//! spline transform and Gaussian log-density, whose adjoints live next to
//! their forward code.
//!
//! ```
//! use rvnp::numcore::{Matrix, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.param(Matrix::row_vector(&[1.0, -2.0]));
//! let y = tape.sum(tape.square(x));
//! let grads = tape.backward(y);
//! assert_eq!(grads.get(x).unwrap().as_slice(), &[2.0, -4.0]);
//! ```

use std::cell::{Ref, RefCell};

use super::matrix::{gemm, Matrix};
use super::special::{gelu, gelu_grad, sigmoid, softplus};
use crate::error::Result;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Gelu,
    Softplus,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
}

impl Unary {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Gelu => gelu(x),
            Unary::Softplus => softplus(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => x.tanh(),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Square => x * x,
        }
    }

    /// Derivative given input `x` and output `y`.
    #[inline]
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Gelu => gelu_grad(x),
            Unary::Softplus => sigmoid(x),
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Square => 2.0 * x,
        }
    }
}

/// A primitive whose forward value is computed by the caller and whose
/// adjoint is supplied here.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients with respect to each input, `None` where `needs[i]` is false.
    fn backward(
        &self,
        inputs: &[&Matrix],
        output: &Matrix,
        grad: &Matrix,
        needs: &[bool],
    ) -> Vec<Option<Matrix>>;
}

enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Unary { x: Var, f: Unary },
    Affine { x: Var, scale: f64 },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    SelectCols { x: Var, idx: Vec<usize> },
    Concat { a: Var, b: Var },
    RepeatRows { x: Var, times: usize },
    SumCols { x: Var },
    Sum { x: Var },
    GroupLogSumExp { x: Var, group: usize },
    GroupMean { x: Var, group: usize },
    AdaptivePool { x: Var, len_in: usize, len_out: usize },
    Reshape { x: Var },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp> },
}

struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
}

/// The recording. Operations take `&self`, so expressions can nest.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of the given shape when nothing flowed.
    pub fn get_or_zeros(&self, v: Var, rows: usize, cols: usize) -> Matrix {
        self.get(v).cloned().unwrap_or_else(|| Matrix::zeros(rows, cols))
    }
}

/// Adaptive average-pool window `[start, end)` for output slot `i`.
pub fn pool_window(i: usize, len_in: usize, len_out: usize) -> (usize, usize) {
    let start = (i * len_in) / len_out;
    let end = ((i + 1) * len_in).div_ceil(len_out);
    (start, end)
}

fn broadcast_shape_ok(a: &Matrix, b: &Matrix) -> bool {
    a.shape() == b.shape() || (b.rows() == 1 && b.cols() == a.cols()) || b.shape() == (1, 1)
}

#[inline]
fn bidx(b: &Matrix, i: usize, j: usize) -> usize {
    match (b.rows(), b.cols()) {
        (1, 1) => 0,
        (1, _) => j,
        (_, c) => i * c + j,
    }
}

/// Reduces a full-shape gradient to the shape of a broadcast operand.
fn reduce_to(g: Matrix, target: (usize, usize)) -> Matrix {
    if g.shape() == target {
        return g;
    }
    let mut out = Matrix::zeros(target.0, target.1);
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let k = bidx(&out, i, j);
            out.as_mut_slice()[k] += g[(i, j)];
        }
    }
    out
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    /// Trainable leaf.
    pub fn param(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Matrix> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes.borrow()[v.0].value.shape()
    }

    /// First entry of `v`; intended for 1×1 losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.as_slice()[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// `x W + b` with `x: r×i`, `W: i×o`, `b: 1×o`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let wv = &nodes[w.0].value;
            assert_eq!(xv.cols(), wv.rows(), "linear: input width mismatch");
            let mut out = Matrix::zeros(xv.rows(), wv.cols());
            if let Some(b) = b {
                let bv = &nodes[b.0].value;
                assert_eq!(bv.shape(), (1, wv.cols()), "linear: bias shape mismatch");
                for i in 0..out.rows() {
                    out.row_mut(i).copy_from_slice(bv.as_slice());
                }
                gemm(1.0, xv, false, wv, false, 1.0, &mut out);
            } else {
                gemm(1.0, xv, false, wv, false, 0.0, &mut out);
            }
            let needs = nodes[x.0].needs_grad
                || nodes[w.0].needs_grad
                || b.is_some_and(|b| nodes[b.0].needs_grad);
            (out, needs)
        };
        self.push(value, Op::Linear { x, w, b }, needs)
    }

    pub fn unary(&self, x: Var, f: Unary) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.map(|v| f.apply(v)), nodes[x.0].needs_grad)
        };
        self.push(value, Op::Unary { x, f }, needs)
    }

    pub fn relu(&self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn gelu(&self, x: Var) -> Var {
        self.unary(x, Unary::Gelu)
    }

    pub fn softplus(&self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn exp(&self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn ln(&self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn square(&self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    /// `scale * x + shift`.
    pub fn affine(&self, x: Var, scale: f64, shift: f64) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.map(|v| scale * v + shift), nodes[x.0].needs_grad)
        };
        self.push(value, Op::Affine { x, scale }, needs)
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        self.affine(x, c, 0.0)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.affine(x, -1.0, 0.0)
    }

    fn binary(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.0].value;
            let bv = &nodes[b.0].value;
            assert!(
                broadcast_shape_ok(av, bv),
                "binary op shape mismatch: {:?} vs {:?}",
                av.shape(),
                bv.shape()
            );
            let mut out = Matrix::zeros(av.rows(), av.cols());
            let bs = bv.as_slice();
            for i in 0..av.rows() {
                for j in 0..av.cols() {
                    out[(i, j)] = f(av[(i, j)], bs[bidx(bv, i, j)]);
                }
            }
            (out, nodes[a.0].needs_grad || nodes[b.0].needs_grad)
        };
        self.push(value, op, needs)
    }

    /// `a + b`; `b` may broadcast as a single row or a 1×1 scalar.
    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn select_cols(&self, x: Var, idx: &[usize]) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.select_cols(idx), nodes[x.0].needs_grad)
        };
        self.push(
            value,
            Op::SelectCols {
                x,
                idx: idx.to_vec(),
            },
            needs,
        )
    }

    /// Column range `[start, end)`.
    pub fn slice_cols(&self, x: Var, start: usize, end: usize) -> Var {
        let idx: Vec<usize> = (start..end).collect();
        self.select_cols(x, &idx)
    }

    pub fn concat_cols(&self, a: Var, b: Var) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            (
                nodes[a.0].value.hstack(&nodes[b.0].value),
                nodes[a.0].needs_grad || nodes[b.0].needs_grad,
            )
        };
        self.push(value, Op::Concat { a, b }, needs)
    }

    /// Each row repeated `times` times consecutively.
    pub fn repeat_rows(&self, x: Var, times: usize) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.repeat_rows(times), nodes[x.0].needs_grad)
        };
        self.push(value, Op::RepeatRows { x, times }, needs)
    }

    /// Row sums, `r×c → r×1`.
    pub fn sum_cols(&self, x: Var) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let data = xv.iter_rows().map(|r| r.iter().sum()).collect();
            (Matrix::from_vec(xv.rows(), 1, data), nodes[x.0].needs_grad)
        };
        self.push(value, Op::SumCols { x }, needs)
    }

    /// Sum of every entry, `→ 1×1`.
    pub fn sum(&self, x: Var) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let s = nodes[x.0].value.as_slice().iter().sum();
            (Matrix::from_vec(1, 1, vec![s]), nodes[x.0].needs_grad)
        };
        self.push(value, Op::Sum { x }, needs)
    }

    pub fn mean(&self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Log-sum-exp over consecutive groups of `group` rows of a column,
    /// `(g·n)×1 → n×1`. `-inf` entries contribute zero mass.
    pub fn group_logsumexp(&self, x: Var, group: usize) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            assert_eq!(xv.cols(), 1, "group_logsumexp expects a column");
            assert!(group > 0 && xv.rows() % group == 0, "group size must divide rows");
            let data = xv
                .as_slice()
                .chunks(group)
                .map(super::special::logsumexp_unchecked)
                .collect();
            (Matrix::from_vec(xv.rows() / group, 1, data), nodes[x.0].needs_grad)
        };
        self.push(value, Op::GroupLogSumExp { x, group }, needs)
    }

    /// Mean over consecutive groups of `group` rows, `(g·n)×c → n×c`.
    pub fn group_mean(&self, x: Var, group: usize) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            assert!(group > 0 && xv.rows() % group == 0, "group size must divide rows");
            let n = xv.rows() / group;
            let mut out = Matrix::zeros(n, xv.cols());
            for g in 0..n {
                for k in 0..group {
                    let src = xv.row(g * group + k);
                    for (o, s) in out.row_mut(g).iter_mut().zip(src) {
                        *o += s;
                    }
                }
                out.row_mut(g).iter_mut().for_each(|v| *v /= group as f64);
            }
            (out, nodes[x.0].needs_grad)
        };
        self.push(value, Op::GroupMean { x, group }, needs)
    }

    /// Adaptive average pooling along a sequence axis stored as blocks of
    /// `len_in` consecutive rows, producing blocks of `len_out` rows.
    pub fn adaptive_avg_pool(&self, x: Var, len_in: usize, len_out: usize) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            assert!(xv.rows() % len_in == 0, "pool input rows must be a multiple of len_in");
            let batch = xv.rows() / len_in;
            let mut out = Matrix::zeros(batch * len_out, xv.cols());
            for b in 0..batch {
                for o in 0..len_out {
                    let (s, e) = pool_window(o, len_in, len_out);
                    let w = 1.0 / (e - s) as f64;
                    for t in s..e {
                        let src = xv.row(b * len_in + t);
                        for (dst, v) in out.row_mut(b * len_out + o).iter_mut().zip(src) {
                            *dst += w * v;
                        }
                    }
                }
            }
            (out, nodes[x.0].needs_grad)
        };
        self.push(
            value,
            Op::AdaptivePool {
                x,
                len_in,
                len_out,
            },
            needs,
        )
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&self, x: Var, rows: usize, cols: usize) -> Var {
        let (value, needs) = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            assert_eq!(xv.len(), rows * cols, "reshape size mismatch");
            (
                Matrix::from_vec(rows, cols, xv.as_slice().to_vec()),
                nodes[x.0].needs_grad,
            )
        };
        self.push(value, Op::Reshape { x }, needs)
    }

    /// Records a custom primitive. `forward` receives the input values and
    /// whether any input needs a gradient, and returns the output value with
    /// the adjoint rule.
    pub fn custom<F>(&self, inputs: &[Var], forward: F) -> Result<Var>
    where
        F: FnOnce(&[&Matrix], bool) -> Result<(Matrix, Box<dyn CustomOp>)>,
    {
        let (value, op, needs) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Matrix> = inputs.iter().map(|v| &nodes[v.0].value).collect();
            let needs = inputs.iter().any(|v| nodes[v.0].needs_grad);
            let (value, op) = forward(&vals, needs)?;
            (value, op, needs)
        };
        Ok(self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            needs,
        ))
    }

    /// Reverse pass from `root`, seeded with ones (i.e. differentiates the
    /// sum of `root`'s entries).
    pub fn backward(&self, root: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Matrix>> = (0..nodes.len()).map(|_| None).collect();
        let (r, c) = nodes[root.0].value.shape();
        grads[root.0] = Some(Matrix::filled(r, c, 1.0));

        for idx in (0..=root.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let need = |v: Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Linear { x, w, b } => {
                    let xv = &nodes[x.0].value;
                    let wv = &nodes[w.0].value;
                    if need(*x) {
                        let mut gx = Matrix::zeros(xv.rows(), xv.cols());
                        gemm(1.0, &g, false, wv, true, 0.0, &mut gx);
                        accumulate(&mut grads[x.0], gx);
                    }
                    if need(*w) {
                        let mut gw = Matrix::zeros(wv.rows(), wv.cols());
                        gemm(1.0, xv, true, &g, false, 0.0, &mut gw);
                        accumulate(&mut grads[w.0], gw);
                    }
                    if let Some(b) = b {
                        if need(*b) {
                            let gb = Matrix::row_vector(&g.mean_rows())
                                .scale(g.rows() as f64);
                            accumulate(&mut grads[b.0], gb);
                        }
                    }
                }
                Op::Unary { x, f } => {
                    let xv = &nodes[x.0].value;
                    let mut gx = g;
                    for ((gv, &xi), &yi) in gx
                        .as_mut_slice()
                        .iter_mut()
                        .zip(xv.as_slice())
                        .zip(node.value.as_slice())
                    {
                        *gv *= f.derivative(xi, yi);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Affine { x, scale } => {
                    accumulate(&mut grads[x.0], g.scale(*scale));
                }
                Op::Add { a, b } => {
                    let bshape = nodes[b.0].value.shape();
                    if need(*b) {
                        accumulate(&mut grads[b.0], reduce_to(g.clone(), bshape));
                    }
                    if need(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub { a, b } => {
                    let bshape = nodes[b.0].value.shape();
                    if need(*b) {
                        accumulate(&mut grads[b.0], reduce_to(g.scale(-1.0), bshape));
                    }
                    if need(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul { a, b } => {
                    let av = &nodes[a.0].value;
                    let bv = &nodes[b.0].value;
                    if need(*a) {
                        let mut ga = g.clone();
                        for i in 0..ga.rows() {
                            for j in 0..ga.cols() {
                                ga[(i, j)] *= bv.as_slice()[bidx(bv, i, j)];
                            }
                        }
                        accumulate(&mut grads[a.0], ga);
                    }
                    if need(*b) {
                        let mut gb = g;
                        for i in 0..gb.rows() {
                            for j in 0..gb.cols() {
                                gb[(i, j)] *= av[(i, j)];
                            }
                        }
                        accumulate(&mut grads[b.0], reduce_to(gb, bv.shape()));
                    }
                }
                Op::SelectCols { x, idx: cols } => {
                    let (xr, xc) = nodes[x.0].value.shape();
                    let mut gx = Matrix::zeros(xr, xc);
                    for i in 0..xr {
                        for (o, &j) in cols.iter().enumerate() {
                            gx[(i, j)] += g[(i, o)];
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Concat { a, b } => {
                    let ac = nodes[a.0].value.cols();
                    let bc = nodes[b.0].value.cols();
                    if need(*a) {
                        let ia: Vec<usize> = (0..ac).collect();
                        accumulate(&mut grads[a.0], g.select_cols(&ia));
                    }
                    if need(*b) {
                        let ib: Vec<usize> = (ac..ac + bc).collect();
                        accumulate(&mut grads[b.0], g.select_cols(&ib));
                    }
                }
                Op::RepeatRows { x, times } => {
                    let (xr, xc) = nodes[x.0].value.shape();
                    let mut gx = Matrix::zeros(xr, xc);
                    for i in 0..xr {
                        for t in 0..*times {
                            let src = g.row(i * times + t);
                            for (d, s) in gx.row_mut(i).iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::SumCols { x } => {
                    let (xr, xc) = nodes[x.0].value.shape();
                    let mut gx = Matrix::zeros(xr, xc);
                    for i in 0..xr {
                        let gi = g[(i, 0)];
                        gx.row_mut(i).iter_mut().for_each(|v| *v = gi);
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Sum { x } => {
                    let (xr, xc) = nodes[x.0].value.shape();
                    accumulate(&mut grads[x.0], Matrix::filled(xr, xc, g[(0, 0)]));
                }
                Op::GroupLogSumExp { x, group } => {
                    let xv = &nodes[x.0].value;
                    let mut gx = Matrix::zeros(xv.rows(), 1);
                    for (k, (chunk, out)) in xv
                        .as_slice()
                        .chunks(*group)
                        .zip(node.value.as_slice())
                        .enumerate()
                    {
                        if *out == f64::NEG_INFINITY {
                            continue;
                        }
                        let gk = g.as_slice()[k];
                        for (j, &v) in chunk.iter().enumerate() {
                            let w = if v == f64::NEG_INFINITY {
                                0.0
                            } else {
                                (v - out).exp()
                            };
                            gx.as_mut_slice()[k * group + j] = gk * w;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::GroupMean { x, group } => {
                    let (xr, xc) = nodes[x.0].value.shape();
                    let mut gx = Matrix::zeros(xr, xc);
                    let w = 1.0 / *group as f64;
                    for i in 0..xr {
                        let src = g.row(i / group);
                        for (d, s) in gx.row_mut(i).iter_mut().zip(src) {
                            *d = w * s;
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::AdaptivePool {
                    x,
                    len_in,
                    len_out,
                } => {
                    let (xr, xc) = nodes[x.0].value.shape();
                    let batch = xr / len_in;
                    let mut gx = Matrix::zeros(xr, xc);
                    for b in 0..batch {
                        for o in 0..*len_out {
                            let (s, e) = pool_window(o, *len_in, *len_out);
                            let w = 1.0 / (e - s) as f64;
                            for t in s..e {
                                let src = g.row(b * len_out + o).to_vec();
                                for (d, v) in gx.row_mut(b * len_in + t).iter_mut().zip(&src) {
                                    *d += w * v;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Reshape { x } => {
                    let (xr, xc) = nodes[x.0].value.shape();
                    accumulate(&mut grads[x.0], Matrix::from_vec(xr, xc, g.into_vec()));
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<&Matrix> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                    let needs: Vec<bool> = inputs.iter().map(|v| need(*v)).collect();
                    let gs = op.backward(&vals, &node.value, &g, &needs);
                    for (v, gi) in inputs.iter().zip(gs) {
                        if let Some(gi) = gi {
                            accumulate(&mut grads[v.0], gi);
                        }
                    }
                }
            }
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradients() {
        let t = Tape::new();
        let x = t.param(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let w = t.param(Matrix::from_rows(&[vec![0.5], vec![-1.0]]));
        let b = t.param(Matrix::row_vector(&[0.25]));
        let y = t.sum(t.linear(x, w, Some(b)));
        assert_eq!(t.scalar(y), (0.5 - 2.0 + 0.25) + (1.5 - 4.0 + 0.25));
        let g = t.backward(y);
        assert_eq!(g.get(w).unwrap().as_slice(), &[4.0, 6.0]);
        assert_eq!(g.get(b).unwrap().as_slice(), &[2.0]);
        assert_eq!(g.get(x).unwrap().as_slice(), &[0.5, -1.0, 0.5, -1.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let t = Tape::new();
        let c = t.constant(Matrix::row_vector(&[1.0, 2.0]));
        let p = t.param(Matrix::row_vector(&[3.0, 4.0]));
        let y = t.sum(t.mul(c, p));
        let g = t.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let t = Tape::new();
        let a = t.param(Matrix::zeros(3, 2));
        let b = t.param(Matrix::row_vector(&[1.0, 2.0]));
        let y = t.sum(t.add(a, b));
        let g = t.backward(y);
        assert_eq!(g.get(b).unwrap().as_slice(), &[3.0, 3.0]);
    }

    #[test]
    fn group_logsumexp_handles_neg_infinity() {
        let t = Tape::new();
        let x = t.param(Matrix::col_vector(&[0.0, f64::NEG_INFINITY, 1.0, 1.0]));
        let y = t.group_logsumexp(x, 2);
        assert_eq!(t.value(y).as_slice()[0], 0.0);
        let s = t.sum(y);
        let g = t.backward(s);
        let gx = g.get(x).unwrap().as_slice().to_vec();
        assert_eq!(gx[0], 1.0);
        assert_eq!(gx[1], 0.0);
        assert!((gx[2] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn pool_windows_cover_sequence() {
        let mut covered = vec![0; 97];
        for o in 0..8 {
            let (s, e) = pool_window(o, 97, 8);
            for c in covered.iter_mut().take(e).skip(s) {
                *c += 1;
            }
        }
        assert!(covered.iter().all(|&c| c >= 1));
        assert_eq!(pool_window(7, 97, 8).1, 97);
    }
}

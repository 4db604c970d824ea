use crate::numcore::{Gradients, Matrix, RngState, Tape, Unary, Var};

/// Hidden-layer nonlinearity. The output layer is always linear.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Tanh,
}

impl Activation {
    fn unary(self) -> Unary {
        match self {
            Activation::Relu => Unary::Relu,
            Activation::Gelu => Unary::Gelu,
            Activation::Tanh => Unary::Tanh,
        }
    }
}

/// Shape of a fully connected network; parameters live in a flat slice
/// laid out as `W₀, b₀, W₁, b₁, …` with `Wₖ` stored `in×out` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(sizes: Vec<usize>, activation: Activation) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self { sizes, activation }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn block_shapes(&self) -> Vec<(usize, usize)> {
        self.sizes
            .windows(2)
            .flat_map(|w| [(w[0], w[1]), (1, w[1])])
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Uniform fan-in initialization; biases start at zero. With
    /// `zero_output` the last layer is all zeros, so the network outputs
    /// exactly zero until trained.
    pub fn init(&self, rng: &mut RngState, zero_output: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        let n_layers = self.sizes.len() - 1;
        for (l, w) in self.sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let last = l + 1 == n_layers;
            let bound = if fan_in == 0 { 0.0 } else { (1.0 / fan_in as f64).sqrt() };
            for _ in 0..fan_in * fan_out {
                out.push(if last && zero_output {
                    0.0
                } else {
                    rng.uniform_range(-bound, bound)
                });
            }
            out.extend(std::iter::repeat_n(0.0, fan_out));
        }
        out
    }

    pub fn bind(&self, tape: &Tape, params: &[f64], trainable: bool) -> BoundMlp {
        BoundMlp {
            vars: bind_blocks(tape, params, &self.block_shapes(), trainable),
            activation: self.activation,
        }
    }

    /// Binds the parameters as slices of a flat `1×n` node starting at
    /// `offset`, so gradients flow back into that node.
    pub fn bind_from(&self, tape: &Tape, flat: Var, offset: usize) -> BoundMlp {
        let mut off = offset;
        let vars = self
            .block_shapes()
            .into_iter()
            .map(|(r, c)| {
                let s = tape.slice_cols(flat, off, off + r * c);
                off += r * c;
                tape.reshape(s, r, c)
            })
            .collect();
        BoundMlp {
            vars,
            activation: self.activation,
        }
    }

    /// Plain forward pass without gradients.
    pub fn eval(&self, params: &[f64], x: &Matrix) -> Matrix {
        let tape = Tape::new();
        let m = self.bind(&tape, params, false);
        let xi = tape.constant(x.clone());
        let y = m.forward(&tape, xi);
        let out = tape.value(y).clone();
        out
    }
}

/// Network parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<Var>,
    activation: Activation,
}

impl BoundMlp {
    pub fn forward(&self, tape: &Tape, x: Var) -> Var {
        let n = self.vars.len() / 2;
        let mut h = x;
        for l in 0..n {
            h = tape.linear(h, self.vars[2 * l], Some(self.vars[2 * l + 1]));
            if l + 1 < n {
                h = tape.unary(h, self.activation.unary());
            }
        }
        h
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Registers consecutive blocks of a flat parameter slice as leaves.
pub fn bind_blocks(
    tape: &Tape,
    params: &[f64],
    shapes: &[(usize, usize)],
    trainable: bool,
) -> Vec<Var> {
    let total: usize = shapes.iter().map(|(r, c)| r * c).sum();
    assert_eq!(params.len(), total, "parameter slice does not match layout");
    let mut off = 0;
    shapes
        .iter()
        .map(|&(r, c)| {
            let m = Matrix::from_vec(r, c, params[off..off + r * c].to_vec());
            off += r * c;
            if trainable {
                tape.param(m)
            } else {
                tape.constant(m)
            }
        })
        .collect()
}

/// Appends the gradients of `vars` in block order; blocks that received no
/// gradient contribute zeros.
pub fn collect_grads(grads: &Gradients, vars: &[Var], tape: &Tape, out: &mut Vec<f64>) {
    for &v in vars {
        match grads.get(v) {
            Some(g) => out.extend_from_slice(g.as_slice()),
            None => {
                let (r, c) = tape.shape(v);
                out.extend(std::iter::repeat_n(0.0, r * c));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_count_matches_layout() {
        let spec = MlpSpec::new(vec![3, 52, 52, 44], Activation::Relu);
        assert_eq!(spec.num_params(), 3 * 52 + 52 + 52 * 52 + 52 + 52 * 44 + 44);
        let p = spec.init(&mut RngState::new(0), true);
        assert_eq!(p.len(), spec.num_params());
        let y = spec.eval(&p, &Matrix::filled(4, 3, 0.3));
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn finite_output_for_finite_input() {
        let spec = MlpSpec::new(vec![2, 8, 1], Activation::Gelu);
        let p = spec.init(&mut RngState::new(1), false);
        let y = spec.eval(&p, &Matrix::from_rows(&[vec![1e3, -1e3]]));
        assert!(y.all_finite());
    }
}

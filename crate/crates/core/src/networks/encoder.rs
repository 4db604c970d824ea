use serde::{Deserialize, Serialize};

use super::mlp::{bind_blocks, Activation, BoundMlp, MlpSpec};
use crate::error::{Error, Result};
use crate::numcore::{Matrix, RngState, Tape, Var};

/// Learned summary statistic for raw time series: a strided 1-D
/// convolution with GELU, adaptive average pooling, and a two-layer GELU
/// head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderArch {
    pub input_len: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pooled: usize,
    pub hidden: usize,
    pub embed_dim: usize,
}

impl EncoderArch {
    pub fn new(input_len: usize, embed_dim: usize) -> Self {
        Self {
            input_len,
            channels: 16,
            kernel: 8,
            stride: 2,
            pooled: 8,
            hidden: 100,
            embed_dim,
        }
    }

    /// Output positions of the convolution.
    pub fn positions(&self) -> usize {
        (self.input_len - self.kernel) / self.stride + 1
    }

    fn head(&self) -> MlpSpec {
        MlpSpec::new(
            vec![self.channels * self.pooled, self.hidden, self.embed_dim],
            Activation::Gelu,
        )
    }

    fn conv_shapes(&self) -> [(usize, usize); 2] {
        [(self.kernel, self.channels), (1, self.channels)]
    }

    pub fn num_params(&self) -> usize {
        self.kernel * self.channels + self.channels + self.head().num_params()
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.stride == 0 || self.input_len < self.kernel || self.pooled == 0 {
            return Err(Error::arg(format!("invalid encoder architecture {self:?}")));
        }
        if self.positions() < self.pooled {
            return Err(Error::arg("encoder pools to more slots than positions"));
        }
        Ok(())
    }

    pub fn init(&self, rng: &mut RngState) -> Vec<f64> {
        let conv = MlpSpec::new(vec![self.kernel, self.channels], Activation::Gelu);
        let mut p = conv.init(rng, false);
        p.extend(self.head().init(rng, false));
        p
    }

    pub fn bind_from(&self, tape: &Tape, flat: Var, offset: usize) -> BoundEncoder {
        let mut off = offset;
        let conv: Vec<Var> = self
            .conv_shapes()
            .iter()
            .map(|&(r, c)| {
                let s = tape.slice_cols(flat, off, off + r * c);
                off += r * c;
                tape.reshape(s, r, c)
            })
            .collect();
        BoundEncoder {
            arch: self.clone(),
            conv_w: conv[0],
            conv_b: conv[1],
            head: self.head().bind_from(tape, flat, off),
        }
    }

    pub fn bind(&self, tape: &Tape, params: &[f64]) -> BoundEncoder {
        let n_conv = self.kernel * self.channels + self.channels;
        let conv = bind_blocks(tape, &params[..n_conv], &self.conv_shapes(), false);
        BoundEncoder {
            arch: self.clone(),
            conv_w: conv[0],
            conv_b: conv[1],
            head: self.head().bind(tape, &params[n_conv..], false),
        }
    }

    /// Embeds each row of `x` (`r × input_len`) into `r × embed_dim`.
    pub fn embed(&self, params: &[f64], x: &Matrix) -> Result<Matrix> {
        if params.len() != self.num_params() {
            return Err(Error::arg("encoder parameter count"));
        }
        let tape = Tape::new();
        let enc = self.bind(&tape, params);
        let z = enc.forward(&tape, tape.constant(x.clone()))?;
        let out = tape.value(z).clone();
        Ok(out)
    }
}

pub struct BoundEncoder {
    arch: EncoderArch,
    conv_w: Var,
    conv_b: Var,
    head: BoundMlp,
}

impl BoundEncoder {
    pub fn forward(&self, tape: &Tape, x: Var) -> Result<Var> {
        let a = &self.arch;
        let (rows, len) = tape.shape(x);
        if len != a.input_len {
            return Err(Error::arg(format!(
                "encoder expects series of length {}, got {len}",
                a.input_len
            )));
        }
        let p = a.positions();
        let idx: Vec<usize> = (0..p)
            .flat_map(|i| (0..a.kernel).map(move |k| i * a.stride + k))
            .collect();
        let patches = tape.reshape(tape.select_cols(x, &idx), rows * p, a.kernel);
        let h = tape.gelu(tape.linear(patches, self.conv_w, Some(self.conv_b)));
        let pooled = tape.adaptive_avg_pool(h, p, a.pooled);
        let flat = tape.reshape(pooled, rows, a.pooled * a.channels);
        Ok(self.head.forward(tape, flat))
    }
}

/// Critic `D(z, θ)` for the InfoMax objective: a ReLU MLP on `[z, θ]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Discriminator {
    pub embed_dim: usize,
    pub theta_dim: usize,
    pub hidden: usize,
}

impl Discriminator {
    pub fn new(embed_dim: usize, theta_dim: usize) -> Self {
        Self {
            embed_dim,
            theta_dim,
            hidden: 100,
        }
    }

    pub fn mlp(&self) -> MlpSpec {
        MlpSpec::new(
            vec![self.embed_dim + self.theta_dim, self.hidden, self.hidden, 1],
            Activation::Relu,
        )
    }

    pub fn num_params(&self) -> usize {
        self.mlp().num_params()
    }
}

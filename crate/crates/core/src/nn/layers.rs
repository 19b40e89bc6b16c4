//! Parameterised building blocks over the [`Tape`].

use rand::Rng;
use rand_distr::StandardNormal;

use super::params::{Binding, ParamId, ParamStore};
use super::tape::{Mat, Tape, Var};

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// He normal, for ReLU-family layers.
    He,
    /// Glorot normal.
    Xavier,
    Zeros,
}

pub(crate) fn init_mat(rows: usize, cols: usize, fan_in: usize, fan_out: usize, init: Init, rng: &mut impl Rng) -> Mat {
    let std = match init {
        Init::He => (2.0 / fan_in as f64).sqrt(),
        Init::Xavier => (2.0 / (fan_in + fan_out) as f64).sqrt(),
        Init::Zeros => return Mat::zeros((rows, cols)),
    };
    Mat::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * std)
}

/// `y = x W + b` with `W: (in × out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, init: Init, rng: &mut impl Rng) -> Self {
        let w = store.add(format!("{name}.w"), init_mat(d_in, d_out, d_in, d_out, init, rng));
        let b = bias.then(|| store.add(format!("{name}.b"), Mat::zeros((1, d_out))));
        Self { w, b }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var) -> Var {
        let y = t.matmul(x, p.var(self.w));
        match self.b {
            Some(b) => t.add_row(y, p.var(b)),
            None => y,
        }
    }
}

/// 1-D convolution over time on `(T × C_in)` inputs, as im2col + matmul.
#[derive(Debug, Clone)]
pub struct Conv1d {
    w: ParamId,
    b: ParamId,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * c_in;
        let w = store.add(format!("{name}.w"), init_mat(fan_in, c_out, fan_in, c_out, init, rng));
        let b = store.add(format!("{name}.b"), Mat::zeros((1, c_out)));
        Self { w, b, kernel, stride, pad: (kernel - 1) / 2 }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var) -> Var {
        let cols = t.im2col(x, self.kernel, self.stride, self.pad);
        let y = t.matmul(cols, p.var(self.w));
        t.add_row(y, p.var(self.b))
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Mat::ones((1, dim)));
        let beta = store.add(format!("{name}.beta"), Mat::zeros((1, dim)));
        Self { gamma, beta }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var) -> Var {
        t.layer_norm(x, p.var(self.gamma), p.var(self.beta))
    }
}

/// Per-channel convolution over time with odd kernel, same-length output.
#[derive(Debug, Clone)]
pub struct DepthwiseConv1d {
    w: ParamId,
    b: ParamId,
}

impl DepthwiseConv1d {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "depthwise kernel must be odd");
        let w = store.add(format!("{name}.w"), init_mat(kernel, channels, kernel, kernel, Init::He, rng));
        let b = store.add(format!("{name}.b"), Mat::zeros((1, channels)));
        Self { w, b }
    }

    pub fn forward(&self, t: &mut Tape, p: &Binding, x: Var) -> Var {
        let y = t.depthwise_conv(x, p.var(self.w));
        t.add_row(y, p.var(self.b))
    }
}

/// Fixed sinusoidal position table, `(len × dim)`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((len, dim), |(pos, i)| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every tensor is two-dimensional: sequences are `(time × channels)`,
//! biases and pooled vectors are `(1 × n)` and scalars are `(1 × 1)`. A
//! [`Tape`] records one forward pass; [`Tape::backward`] walks it in reverse.

use ndarray::{concatenate, s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    Relu(Var),
    Silu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Vec<f64> },
    L2NormRows { x: Var, norms: Vec<f64> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Im2Col { x: Var, kernel: usize, stride: usize, pad: usize },
    DepthwiseConv { x: Var, w: Var },
    MeanStdPool { x: Var, mean: Vec<f64>, std: Vec<f64> },
    WeightedSum { x: Var, weights: Mat },
    /// Scalar loss whose gradient with respect to `x` was computed eagerly.
    Loss { x: Var, grad: Mat },
}

/// A recorded computation.
#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Mat>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.values.push(value);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.values[v.0]
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.values[v.0][[0, 0]]
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.push(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).dim(), self.value(b).dim(), "add: shape mismatch");
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Adds a `(1 × n)` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row: bias must be a single row");
        let out = self.value(x) + self.value(row);
        self.push(out, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x) * factor;
        self.push(out, Op::Scale(x, factor))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v * sigmoid(v));
        self.push(out, Op::Silu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for mut row in out.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        self.push(out, Op::SoftmaxRows(x))
    }

    /// Row-wise layer normalisation with `(1 × n)` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * inv);
            inv_std.push(inv);
        }
        let out = &xhat * self.value(gamma) + self.value(beta);
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt().max(1e-12);
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        self.push(out, Op::L2NormRows { x, norms })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Unfolds `(T × C)` into `(T_out × kernel·C)` patches so a 1-D
    /// convolution becomes a matrix product. Out-of-range taps read zero.
    pub fn im2col(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let xv = self.value(x);
        let (t, c) = xv.dim();
        let t_out = conv_out_len(t, kernel, stride, pad);
        let mut out = Mat::zeros((t_out, kernel * c));
        for o in 0..t_out {
            for j in 0..kernel {
                let src = (o * stride + j) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    out.slice_mut(s![o, j * c..(j + 1) * c]).assign(&xv.row(src as usize));
                }
            }
        }
        self.push(out, Op::Im2Col { x, kernel, stride, pad })
    }

    /// Same-length depthwise convolution; `w` is `(kernel × C)` with odd kernel.
    pub fn depthwise_conv(&mut self, x: Var, w: Var) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let (t, c) = xv.dim();
        let k = wv.nrows();
        assert_eq!(wv.ncols(), c, "depthwise_conv: channel mismatch");
        let pad = (k - 1) / 2;
        let mut out = Mat::zeros((t, c));
        for o in 0..t {
            for j in 0..k {
                let src = o as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    let mut row = out.row_mut(o);
                    row.zip_mut_with(&(&xv.row(src as usize) * &wv.row(j)), |a, b| *a += b);
                }
            }
        }
        self.push(out, Op::DepthwiseConv { x, w })
    }

    /// Temporal statistics pooling: `(T × C)` to `(1 × 2C)` of means then
    /// standard deviations.
    pub fn mean_std_pool(&mut self, x: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let (t, c) = xv.dim();
        let tn = t as f64;
        let mut mean = vec![0.0; c];
        let mut std = vec![0.0; c];
        for (ch, col) in xv.axis_iter(Axis(1)).enumerate() {
            let m = col.sum() / tn;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / tn;
            mean[ch] = m;
            std[ch] = (var + EPS).sqrt();
        }
        let mut out = Mat::zeros((1, 2 * c));
        for ch in 0..c {
            out[[0, ch]] = mean[ch];
            out[[0, c + ch]] = std[ch];
        }
        self.push(out, Op::MeanStdPool { x, mean, std })
    }

    /// `Σ x ∘ weights` as a scalar; used to project outputs onto a fixed
    /// direction in gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Mat) -> Var {
        assert_eq!(self.value(x).dim(), weights.dim());
        let v = (self.value(x) * &weights).sum();
        self.push(Mat::from_elem((1, 1), v), Op::WeightedSum { x, weights })
    }

    /// Records a scalar loss together with its precomputed gradient.
    pub fn loss(&mut self, x: Var, value: f64, grad: Mat) -> Var {
        assert_eq!(self.value(x).dim(), grad.dim());
        self.push(Mat::from_elem((1, 1), value), Op::Loss { x, grad })
    }

    /// Back-propagates from the scalar `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).dim(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; out.0 + 1];
        grads[out.0] = Some(Mat::ones((1, 1)));
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(x, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *x, g);
                }
                Op::Scale(x, f) => accumulate(&mut grads, *x, g * *f),
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(&self.values[i], |d, &y| {
                        if y <= 0.0 {
                            *d = 0.0
                        }
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Silu(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(self.value(*x), |d, &v| {
                        let s = sigmoid(v);
                        *d *= s * (1.0 + v * (1.0 - s));
                    });
                    accumulate(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(&self.values[i], |d, &y| *d *= y * (1.0 - y));
                    accumulate(&mut grads, *x, gx);
                }
                Op::SoftmaxRows(x) => {
                    let y = &self.values[i];
                    let mut gx = Mat::zeros(y.dim());
                    for ((mut gr, yr), dr) in gx.rows_mut().into_iter().zip(y.rows()).zip(g.rows()) {
                        let dot = yr.dot(&dr);
                        for ((o, &yv), &dv) in gr.iter_mut().zip(yr).zip(dr) {
                            *o = yv * (dv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gamma_v = self.value(*gamma);
                    let g_gamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let g_beta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gamma_v;
                    let n = xhat.ncols() as f64;
                    let mut gx = Mat::zeros(xhat.dim());
                    for (r, mut out) in gx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let h = xhat.row(r);
                        let sum_dh = dh.sum();
                        let sum_dh_h = dh.dot(&h);
                        for c in 0..out.len() {
                            out[c] = inv_std[r] / n * (n * dh[c] - sum_dh - h[c] * sum_dh_h);
                        }
                    }
                    accumulate(&mut grads, *gamma, g_gamma);
                    accumulate(&mut grads, *beta, g_beta);
                    accumulate(&mut grads, *x, gx);
                }
                Op::L2NormRows { x, norms } => {
                    let y = &self.values[i];
                    let mut gx = Mat::zeros(y.dim());
                    for (r, mut out) in gx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let dr = g.row(r);
                        let dot = yr.dot(&dr);
                        for c in 0..out.len() {
                            out[c] = (dr[c] - yr[c] * dot) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::SliceCols { x, start } => {
                    let mut gx = Mat::zeros(self.value(*x).dim());
                    gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *x, gx);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                        offset += w;
                    }
                }
                Op::Im2Col { x, kernel, stride, pad } => {
                    let (t, c) = self.value(*x).dim();
                    let mut gx = Mat::zeros((t, c));
                    for o in 0..g.nrows() {
                        for j in 0..*kernel {
                            let src = (o * stride + j) as isize - *pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let mut row = gx.row_mut(src as usize);
                                row += &g.slice(s![o, j * c..(j + 1) * c]);
                            }
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::DepthwiseConv { x, w } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (t, _) = xv.dim();
                    let k = wv.nrows();
                    let pad = (k - 1) / 2;
                    let mut gx = Mat::zeros(xv.dim());
                    let mut gw = Mat::zeros(wv.dim());
                    for o in 0..t {
                        for j in 0..k {
                            let src = o as isize + j as isize - pad as isize;
                            if src >= 0 && (src as usize) < t {
                                let src = src as usize;
                                let go = g.row(o);
                                let mut gxr = gx.row_mut(src);
                                gxr += &(&go * &wv.row(j));
                                let mut gwr = gw.row_mut(j);
                                gwr += &(&go * &xv.row(src));
                            }
                        }
                    }
                    accumulate(&mut grads, *w, gw);
                    accumulate(&mut grads, *x, gx);
                }
                Op::MeanStdPool { x, mean, std } => {
                    let xv = self.value(*x);
                    let (t, c) = xv.dim();
                    let tn = t as f64;
                    let mut gx = Mat::zeros((t, c));
                    for ch in 0..c {
                        let gm = g[[0, ch]] / tn;
                        let gs = g[[0, c + ch]] / (std[ch] * tn);
                        for r in 0..t {
                            gx[[r, ch]] = gm + gs * (xv[[r, ch]] - mean[ch]);
                        }
                    }
                    accumulate(&mut grads, *x, gx);
                }
                Op::WeightedSum { x, weights } => {
                    accumulate(&mut grads, *x, weights * g[[0, 0]]);
                }
                Op::Loss { x, grad } => {
                    accumulate(&mut grads, *x, grad * g[[0, 0]]);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (len + 2 * pad - kernel) / stride + 1
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradient, random_mat};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks every op in isolation against central differences.
    fn check_unary(build: impl Fn(&mut Tape, Var) -> Var, rows: usize, cols: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = random_mat(rows, cols, 1.0, &mut rng);
        let probe = {
            let mut t = Tape::new();
            let x = t.leaf(x0.clone());
            let y = build(&mut t, x);
            random_mat(t.value(y).nrows(), t.value(y).ncols(), 1.0, &mut rng)
        };
        let err = check_gradient(&x0, |t, x| {
            let y = build(t, x);
            t.weighted_sum(y, probe.clone())
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn elementwise_ops() {
        check_unary(|t, x| t.relu(x), 4, 3, 1);
        check_unary(|t, x| t.silu(x), 4, 3, 2);
        check_unary(|t, x| t.sigmoid(x), 4, 3, 3);
        check_unary(|t, x| t.scale(x, -2.5), 4, 3, 4);
        check_unary(|t, x| t.mul(x, x), 4, 3, 5);
    }

    #[test]
    fn row_ops() {
        check_unary(|t, x| t.softmax_rows(x), 3, 5, 6);
        check_unary(|t, x| t.l2_normalize_rows(x), 3, 5, 7);
        check_unary(
            |t, x| {
                let g = t.leaf(Mat::from_shape_fn((1, 5), |(_, c)| 0.5 + c as f64 * 0.1));
                let b = t.leaf(Mat::from_shape_fn((1, 5), |(_, c)| c as f64 * 0.05));
                t.layer_norm(x, g, b)
            },
            3,
            5,
            8,
        );
        check_unary(|t, x| t.mean_std_pool(x), 6, 3, 9);
    }

    #[test]
    fn structural_ops() {
        check_unary(|t, x| t.matmul_t(x, x), 4, 3, 10);
        check_unary(|t, x| t.im2col(x, 3, 2, 1), 8, 3, 11);
        check_unary(|t, x| t.im2col(x, 3, 1, 1), 5, 2, 12);
        check_unary(
            |t, x| {
                let a = t.slice_cols(x, 0, 2);
                let b = t.slice_cols(x, 2, 5);
                t.concat_cols(&[b, a])
            },
            3,
            5,
            13,
        );
        check_unary(
            |t, x| {
                let w = t.leaf(Mat::from_shape_fn((3, 4), |(r, c)| (r as f64 - 1.0) * 0.3 + c as f64 * 0.1));
                t.depthwise_conv(x, w)
            },
            6,
            4,
            14,
        );
    }

    #[test]
    fn weights_of_depthwise_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x0 = random_mat(6, 4, 1.0, &mut rng);
        let w0 = random_mat(5, 4, 1.0, &mut rng);
        let probe = random_mat(6, 4, 1.0, &mut rng);
        let err = check_gradient(&w0, |t, w| {
            let x = t.leaf(x0.clone());
            let y = t.depthwise_conv(x, w);
            t.weighted_sum(y, probe.clone())
        });
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn im2col_shape() {
        let mut t = Tape::new();
        let x = t.leaf(Mat::zeros((320, 4)));
        let y = t.im2col(x, 3, 2, 1);
        assert_eq!(t.value(y).dim(), (160, 12));
    }
}

//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates forward passes, so it stays independent
//! of every backward rule it checks.

use rand::Rng;
use rand_distr::StandardNormal;

use super::tape::{Mat, Tape, Var};

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

pub fn random_mat(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.sample::<f64, _>(StandardNormal) * scale)
}

/// Numerical gradient of the scalar `f(x)` at `x0`.
pub fn numerical_gradient(x0: &Mat, f: &impl Fn(&mut Tape, Var) -> Var) -> Mat {
    let eval = |x: Mat| {
        let mut t = Tape::new();
        let v = t.leaf(x);
        let out = f(&mut t, v);
        t.scalar(out)
    };
    let mut g = Mat::zeros(x0.dim());
    for idx in 0..x0.len() {
        let (r, c) = (idx / x0.ncols(), idx % x0.ncols());
        let mut plus = x0.clone();
        plus[[r, c]] += FD_STEP;
        let mut minus = x0.clone();
        minus[[r, c]] -= FD_STEP;
        g[[r, c]] = (eval(plus) - eval(minus)) / (2.0 * FD_STEP);
    }
    g
}

/// Analytic gradient of the scalar `f(x)` at `x0`, via the tape.
pub fn analytic_gradient(x0: &Mat, f: &impl Fn(&mut Tape, Var) -> Var) -> Mat {
    let mut t = Tape::new();
    let v = t.leaf(x0.clone());
    let out = f(&mut t, v);
    let grads = t.backward(out);
    grads.wrt(v).cloned().unwrap_or_else(|| Mat::zeros(x0.dim()))
}

/// Element-wise relative error between two gradients.
///
/// Each entry is compared relative to the larger of its two magnitudes,
/// floored at 1e-3 of the largest numerical entry so that entries near zero
/// are judged on the gradient's own scale.
pub fn max_relative_error(analytic: &Mat, numeric: &Mat) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * scale).max(1e-12);
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Max relative error between analytic and central-difference gradients.
pub fn check_gradient(x0: &Mat, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
    let a = analytic_gradient(x0, &f);
    let n = numerical_gradient(x0, &f);
    max_relative_error(&a, &n)
}

//! Additive angular margin softmax.
//!
//! For a row of cosine similarities `c` against class centres and target
//! `y`, the target logit becomes `s·cos(θ_y + m)` and every other logit
//! stays `s·c_j`. When `θ_y + m` would pass π the usual linear fallback
//! `c_y − m·sin(m)` keeps the target logit monotone in `c_y`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Mat, Tape, Var};

/// Scale and margin of the loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AamConfig {
    pub scale: f64,
    pub margin: f64,
}

impl Default for AamConfig {
    fn default() -> Self {
        Self { scale: 30.0, margin: 0.15 }
    }
}

/// Loss value and `∂loss/∂cos`, averaged over rows.
#[derive(Debug, Clone)]
pub struct AamOutput {
    pub loss: f64,
    pub grad: Mat,
    pub correct: usize,
}

/// Evaluates the loss on a `(positions × classes)` cosine matrix.
pub fn aam_softmax(cos: &Mat, labels: &[usize], cfg: AamConfig) -> Result<AamOutput> {
    let (n, classes) = cos.dim();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} positions", labels.len())));
    }
    if n == 0 {
        return Err(Error::Shape("no positions to score".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {classes} classes")));
    }
    let (cos_m, sin_m) = (cfg.margin.cos(), cfg.margin.sin());
    let threshold = (std::f64::consts::PI - cfg.margin).cos();
    let fallback = (std::f64::consts::PI - cfg.margin).sin() * cfg.margin;

    let mut loss = 0.0;
    let mut correct = 0;
    let mut grad = Mat::zeros((n, classes));
    let mut logits = vec![0.0; classes];
    for (r, &y) in labels.iter().enumerate() {
        let c = cos[[r, y]].clamp(-1.0, 1.0);
        let (phi, dphi) = if c > threshold {
            let s2 = 1.0 - c * c;
            let (sin, dsin) = if s2 > 1e-12 { (s2.sqrt(), -c / s2.sqrt()) } else { (1e-6, 0.0) };
            (c * cos_m - sin * sin_m, cos_m - dsin * sin_m)
        } else {
            (c - fallback, 1.0)
        };
        for j in 0..classes {
            logits[j] = cfg.scale * if j == y { phi } else { cos[[r, j]] };
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
        loss += max + sum.ln() - logits[y];
        let argmax = (0..classes).fold(0, |b, j| if cos[[r, j]] > cos[[r, b]] { j } else { b });
        if argmax == y {
            correct += 1;
        }
        for j in 0..classes {
            let p = (logits[j] - max).exp() / sum;
            let dz = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
            grad[[r, j]] = cfg.scale * dz * if j == y { dphi } else { 1.0 };
        }
    }
    Ok(AamOutput { loss: loss / n as f64, grad, correct })
}

/// Cosine logits of `embeddings (n × d)` against `centres (classes × d)`
/// followed by the margin loss, recorded on the tape.
pub fn aam_softmax_on_tape(
    t: &mut Tape,
    embeddings: Var,
    centres: Var,
    labels: &[usize],
    cfg: AamConfig,
) -> Result<(Var, AamOutput)> {
    let e = t.l2_normalize_rows(embeddings);
    let w = t.l2_normalize_rows(centres);
    let cos = t.matmul_t(e, w);
    let out = aam_softmax(t.value(cos), labels, cfg)?;
    let v = t.loss(cos, out.loss, out.grad.clone());
    Ok((v, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_gradient, random_mat};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn plain_scaled_ce(cos: &Mat, labels: &[usize], s: f64) -> f64 {
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let z: Vec<f64> = cos.row(r).iter().map(|c| s * c).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - z[y];
        }
        total / labels.len() as f64
    }

    #[test]
    fn zero_margin_is_scaled_cross_entropy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cos = random_mat(5, 4, 0.3, &mut rng).mapv(|v: f64| v.clamp(-1.0, 1.0));
        let labels = [0, 3, 1, 2, 2];
        let out = aam_softmax(&cos, &labels, AamConfig { scale: 30.0, margin: 0.0 }).unwrap();
        assert!((out.loss - plain_scaled_ce(&cos, &labels, 30.0)).abs() < 1e-6);
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        for classes in [2usize, 5, 10] {
            let cos = Mat::from_elem((3, classes), 0.2);
            let out = aam_softmax(&cos, &[0, 1, 0], AamConfig { scale: 30.0, margin: 0.0 }).unwrap();
            assert!((out.loss - (classes as f64).ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let cos = Mat::zeros((2, 3));
        assert!(aam_softmax(&cos, &[0, 3], AamConfig::default()).is_err());
        assert!(aam_softmax(&cos, &[0], AamConfig::default()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let emb = random_mat(2, 4, 1.0, &mut rng);
        let centres = random_mat(3, 4, 1.0, &mut rng);
        let labels = [1usize, 2];
        let cfg = AamConfig::default();
        let err_e = check_gradient(&emb, |t, e| {
            let w = t.leaf(centres.clone());
            aam_softmax_on_tape(t, e, w, &labels, cfg).unwrap().0
        });
        let err_w = check_gradient(&centres, |t, w| {
            let e = t.leaf(emb.clone());
            aam_softmax_on_tape(t, e, w, &labels, cfg).unwrap().0
        });
        assert!(err_e < 1e-4, "embedding grad error {err_e}");
        assert!(err_w < 1e-4, "centre grad error {err_w}");
    }

    proptest! {
        #[test]
        fn margin_never_lowers_loss_on_correct_positions(
            target in 0.0f64..0.99,
            others in proptest::collection::vec(-0.99f64..0.99, 3),
        ) {
            let mut row = vec![target];
            row.extend(others.iter().map(|o| o.min(target - 1e-3)));
            let cos = Mat::from_shape_vec((1, 4), row).unwrap();
            let with = aam_softmax(&cos, &[0], AamConfig { scale: 30.0, margin: 0.15 }).unwrap().loss;
            let without = aam_softmax(&cos, &[0], AamConfig { scale: 30.0, margin: 0.0 }).unwrap().loss;
            prop_assert!(with >= without - 1e-12);
        }
    }
}

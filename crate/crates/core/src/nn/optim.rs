use super::params::{ParamId, ParamStore};
use super::tape::Mat;

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Mat> = params.iter().map(|(_, m)| Mat::zeros(m.dim())).collect();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn from_parts(step: u64, m: Vec<Mat>, v: Vec<Mat>) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Mat], &[Mat]) {
        (&self.m, &self.v)
    }

    /// Applies one update. `grads[i]` belongs to parameter `i`; parameters for
    /// which `trainable` returns false, or that have no gradient, are left
    /// bit-identical and their moments untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &[Option<Mat>], lr: f64, trainable: impl Fn(&str) -> bool) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<ParamId> = params.ids().collect();
        for id in ids {
            let i = id.0;
            let Some(g) = grads.get(i).and_then(|g| g.as_ref()) else { continue };
            if !trainable(params.name(id)) {
                continue;
            }
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            self.m[i].zip_mut_with(g, |m, &g| *m = b1 * *m + (1.0 - b1) * g);
            self.v[i].zip_mut_with(g, |v, &g| *v = b2 * *v + (1.0 - b2) * g * g);
            let p = params.get_mut(id);
            ndarray::Zip::from(p).and(&self.m[i]).and(&self.v[i]).for_each(|p, &m, &v| {
                *p -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
            });
        }
    }
}

/// Scales gradients in place so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Mat>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let f = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * f);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::from_elem((1, 2), 3.0));
        let mut opt = Adam::new(&store);
        for _ in 0..2000 {
            let g = store.get(id) * 2.0;
            opt.update(&mut store, &[Some(g)], 0.01, |_| true);
        }
        assert!(store.get(id).iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn frozen_parameters_do_not_move() {
        let mut store = ParamStore::new();
        let a = store.add("backbone.w", Mat::from_elem((1, 1), 1.0));
        let b = store.add("head.w", Mat::from_elem((1, 1), 1.0));
        let mut opt = Adam::new(&store);
        let g = Some(Mat::from_elem((1, 1), 1.0));
        opt.update(&mut store, &[g.clone(), g], 0.1, |n| !n.starts_with("backbone."));
        assert_eq!(store.get(a)[[0, 0]].to_bits(), 1.0f64.to_bits());
        assert!(store.get(b)[[0, 0]] < 1.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Some(Mat::from_elem((1, 2), 3.0)), None, Some(Mat::from_elem((1, 1), 4.0))];
        let before = clip_global_norm(&mut g, 1.0);
        assert!((before - (9.0f64 + 9.0 + 16.0).sqrt()).abs() < 1e-12);
        let after: f64 = g.iter().flatten().map(|m| m.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
        assert!((after - 1.0).abs() < 1e-12);
    }
}

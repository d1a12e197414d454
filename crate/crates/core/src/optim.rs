//! Adam with bias correction, global-norm clipping and the cosine schedule.

use crate::params::{ParamGrads, ParamId, ParamMask, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// `lr_init * 0.5 * (1 + cos(pi * step / total_steps))`.
pub fn cosine_lr(step: u64, total_steps: u64, lr_init: f64) -> f64 {
    if total_steps == 0 {
        return lr_init;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    lr_init * 0.5 * (1.0 + (std::f64::consts::PI * s).cos())
}

/// Scales `grads` so their global L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut ParamGrads<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if max_norm > 0.0 && norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of updates applied so far.
    pub t: u64,
    /// First and second moments, indexed by parameter id; `None` for
    /// parameters this optimizer does not own.
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Adam<T> {
    /// Moments for every parameter selected by `mask`, zero-initialized.
    pub fn new(store: &ParamStore<T>, mask: &ParamMask, beta1: f64, beta2: f64, eps: f64) -> Self {
        let init = |id: ParamId| mask.contains(id).then(|| Tensor::zeros(store.get(id).shape()));
        Self {
            beta1,
            beta2,
            eps,
            t: 0,
            m: store.ids().map(init).collect(),
            v: store.ids().map(init).collect(),
        }
    }

    /// One update with learning rate `lr`. Parameters without moments or
    /// without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &ParamGrads<T>, lr: f64) {
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let step = T::of(lr / c1);
        let inv_c2 = T::of(1.0 / c2);
        let eps = T::of(self.eps);
        for (id, g) in grads.iter() {
            let (Some(m), Some(v)) = (self.m[id.index()].as_mut(), self.v[id.index()].as_mut()) else {
                continue;
            };
            let p = store.get_mut(id);
            for (((pv, mv), vv), &gv) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *mv = b1 * *mv + (T::one() - b1) * gv;
                *vv = b2 * *vv + (T::one() - b2) * gv * gv;
                *pv -= step * *mv / ((*vv * inv_c2).sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn cosine_closed_form() {
        assert_eq!(cosine_lr(0, 100, 1e-4), 1e-4);
        assert!(cosine_lr(100, 100, 1e-4).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 1e-4) - 5e-5).abs() < 1e-18);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let total = rng.random_range(1..10_000u64);
            let s = rng.random_range(0..=total);
            let expect = 1e-3 * 0.5 * (1.0 + (std::f64::consts::PI * s as f64 / total as f64).cos());
            assert!((cosine_lr(s, total, 1e-3) - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_the_gradient() {
        let mut store = ParamStore::<f64>::new();
        let a = store.insert("a", Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0])).unwrap();
        let b = store.insert("b", Tensor::from_vec(&[1], vec![5.0])).unwrap();
        let mask = store.mask_for(&["a"]);
        let mut opt = Adam::new(&store, &mask, 0.9, 0.99, 1e-12);
        let mut g = ParamGrads::new(store.len());
        g.accumulate(a, &Tensor::from_vec(&[3], vec![0.5, -2.0, 0.0]));
        g.accumulate(b, &Tensor::from_vec(&[1], vec![1.0]));
        opt.step(&mut store, &g, 0.1);
        let got = store.get(a).data();
        assert!((got[0] - 0.9).abs() < 1e-9 && (got[1] - 2.1).abs() < 1e-9 && got[2] == 3.0);
        assert_eq!(store.get(b).data(), &[5.0]);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let x = store.insert("x", Tensor::from_vec(&[2], vec![3.0, -4.0])).unwrap();
        let mask = ParamMask::all(1);
        let mut opt = Adam::new(&store, &mask, 0.9, 0.99, 1e-8);
        for s in 0..500 {
            let mut g = ParamGrads::new(1);
            g.accumulate(x, &store.get(x).scale(2.0));
            opt.step(&mut store, &g, cosine_lr(s, 500, 0.1));
        }
        assert!(store.get(x).max_abs() < 1e-2);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = ParamGrads::<f64>::new(1);
        g.accumulate(ParamId(0), &Tensor::from_vec(&[2], vec![3.0, 4.0]));
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 2.0), g.global_norm());
    }
}

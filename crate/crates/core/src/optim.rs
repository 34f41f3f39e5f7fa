//! AdamW with decoupled weight decay.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    // per-parameter step counts; a parameter without gradient is left alone
    steps: Vec<u64>,
    step_count: u64,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            m: Vec::new(),
            v: Vec::new(),
            steps: Vec::new(),
            step_count: 0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// First and second moment estimates of a parameter, once it has been stepped.
    pub fn moments(&self, idx: usize) -> Option<(&Matrix, &Matrix)> {
        Some((self.m.get(idx)?, self.v.get(idx)?))
    }

    /// One update. `grads[i] = None` skips parameter `i` entirely
    /// (no decay, no moment update).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Matrix>]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: (store.len(), 1),
                rhs: (grads.len(), 1),
            });
        }
        // parameters added since the last step (e.g. a replaced head) start fresh
        for id in store.ids().skip(self.m.len()) {
            self.m.push(store.get(id).map(|_| 0.0));
            self.v.push(store.get(id).map(|_| 0.0));
            self.steps.push(0);
        }
        for (id, g) in store.ids().zip(grads) {
            if let Some(g) = g {
                if g.shape() != store.get(id).shape() {
                    return Err(Error::ShapeMismatch {
                        op: "adamw_step",
                        lhs: store.get(id).shape(),
                        rhs: g.shape(),
                    });
                }
            }
        }
        self.step_count += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        for (id, g) in store.ids().zip(grads) {
            let Some(g) = g else { continue };
            let i = id.0;
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let c1 = 1.0 - b1.powi(t);
            let c2 = 1.0 - b2.powi(t);
            let decay = 1.0 - self.lr * self.weight_decay;
            let p = store.get_mut(id).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for k in 0..p.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                p[k] = p[k] * decay - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Matrix::new(1, v.len(), v.to_vec()).unwrap());
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut s = one_param(&[1.0, -2.0]);
        let mut opt = AdamW::new(0.1).with_weight_decay(0.0);
        for _ in 0..3 {
            opt.step(&mut s, &[Some(Matrix::zeros(1, 2))]).unwrap();
        }
        assert_eq!(s.get(crate::autodiff::ParamId(0)).data(), &[1.0, -2.0]);
        assert_eq!(opt.step_count(), 3);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let (lr, g, p0) = (1e-2, [0.5, -3.0, 1e-9], [1.0, 2.0, 3.0]);
        let mut s = one_param(&p0);
        let mut opt = AdamW::new(lr);
        opt.step(&mut s, &[Some(Matrix::new(1, 3, g.to_vec()).unwrap())]).unwrap();
        for k in 0..3 {
            // m̂ = g, v̂ = g² after bias correction
            let m = 0.1 * g[k] / 0.1;
            let v = 0.001 * g[k] * g[k] / 0.001;
            let expected = p0[k] * (1.0 - lr * 0.01) - lr * m / (v.sqrt() + 1e-8);
            let got = s.get(crate::autodiff::ParamId(0)).data()[k];
            assert!((got - expected).abs() < 1e-15, "{k}: {got} vs {expected}");
        }
    }

    #[test]
    fn decoupled_decay_with_zero_gradient() {
        let mut s = one_param(&[2.0]);
        let mut opt = AdamW::new(0.1);
        opt.step(&mut s, &[Some(Matrix::zeros(1, 1))]).unwrap();
        // shrinks by lr · 0.01 · param
        assert!((s.get(crate::autodiff::ParamId(0)).data()[0] - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn skipped_parameters_stay_put() {
        let mut s = one_param(&[2.0]);
        s.add("q", Matrix::from_rows(&[&[5.0]]));
        let mut opt = AdamW::new(0.1);
        opt.step(&mut s, &[Some(Matrix::from_rows(&[&[1.0]])), None]).unwrap();
        assert_eq!(s.get(crate::autodiff::ParamId(1)).data(), &[5.0]);
    }

    #[test]
    fn shape_checks() {
        let mut s = one_param(&[2.0]);
        let mut opt = AdamW::new(0.1);
        assert!(matches!(opt.step(&mut s, &[]), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(
            opt.step(&mut s, &[Some(Matrix::zeros(2, 1))]),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}

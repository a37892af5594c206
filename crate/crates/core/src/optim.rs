//! SGD with momentum and Adam over named parameters of a [`ParamStore`].

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamStore, Role};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimKind {
    /// `v = momentum * v + g; p -= lr * v`.
    Sgd { momentum: f64 },
    /// Bias-corrected Adam.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    pub kind: OptimKind,
    pub lr: f64,
    steps: u64,
    /// Per-tensor buffers: momentum for SGD, first and second moments for Adam.
    slots: BTreeMap<String, (Tensor, Tensor)>,
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64) -> Optimizer {
        Optimizer::new(OptimKind::Sgd { momentum }, lr)
    }

    pub fn adam(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Optimizer {
        Optimizer::new(OptimKind::Adam { beta1, beta2, eps }, lr)
    }

    pub fn new(kind: OptimKind, lr: f64) -> Optimizer {
        Optimizer {
            kind,
            lr,
            steps: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of every tensor whose role is `trainable`.
    ///
    /// Every trainable tensor must have a gradient of its own shape, and no
    /// other tensor may have one; violations abort before anything is written.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        trainable: impl Fn(Role) -> bool,
    ) -> Result<()> {
        for (name, t) in params.iter() {
            let train = Role::of(name).is_some_and(&trainable);
            match (grads.get(name), train) {
                (None, true) => {
                    return Err(Error::Invariant(format!("no gradient for trainable tensor `{name}`")));
                }
                (Some(_), false) => {
                    return Err(Error::Invariant(format!("gradient supplied for frozen tensor `{name}`")));
                }
                (Some(g), true) if g.shape() != t.shape() => {
                    return Err(Error::Invariant(format!(
                        "gradient for `{name}` has shape {:?}, tensor has {:?}",
                        g.shape(),
                        t.shape()
                    )));
                }
                _ => {}
            }
        }
        if let Some(stray) = grads.keys().find(|k| params.get(k).is_none()) {
            return Err(Error::Invariant(format!("gradient for unknown tensor `{stray}`")));
        }

        self.steps += 1;
        let t = self.steps as i32;
        let lr = self.lr;
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (a, b) = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(g.shape().to_vec()), Tensor::zeros(g.shape().to_vec())));
            let (p, g) = (p.data_mut(), g.data());
            match self.kind {
                OptimKind::Sgd { momentum } => {
                    for ((p, v), g) in p.iter_mut().zip(a.data_mut()).zip(g) {
                        *v = momentum * *v + g;
                        *p -= lr * *v;
                    }
                }
                OptimKind::Adam { beta1, beta2, eps } => {
                    let c1 = 1.0 - beta1.powi(t);
                    let c2 = 1.0 - beta2.powi(t);
                    for (((p, m), v), g) in p.iter_mut().zip(a.data_mut()).zip(b.data_mut()).zip(g) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mh = *m / c1;
                        let vh = *v / c2;
                        *p -= lr * mh / (vh.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("backbone.w", Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        p.insert("cvae.w", Tensor::new([2], vec![0.25, 4.0]).unwrap());
        p
    }

    fn grads(names: &[&str], p: &ParamStore) -> BTreeMap<String, Tensor> {
        names
            .iter()
            .map(|n| {
                let t = p.get(n).unwrap();
                (n.to_string(), Tensor::from_fn(t.shape().to_vec(), |i| 0.3 - i as f64))
            })
            .collect()
    }

    #[test]
    fn plain_sgd_step() {
        let mut p = store();
        let g = grads(&["backbone.w"], &p);
        let before = p.get("backbone.w").unwrap().clone();
        Optimizer::sgd(0.1, 0.0).step(&mut p, &g, |r| r == Role::Backbone).unwrap();
        let after = p.get("backbone.w").unwrap();
        for i in 0..3 {
            assert_eq!(after.data()[i], before.data()[i] - 0.1 * g["backbone.w"].data()[i]);
        }
    }

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = store();
        let before = p.clone();
        let g = BTreeMap::from([("backbone.w".to_string(), Tensor::zeros([3]))]);
        Optimizer::sgd(0.1, 0.0).step(&mut p, &g, |r| r == Role::Backbone).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = store();
        let g = grads(&["backbone.w"], &p);
        let mut opt = Optimizer::sgd(0.1, 0.9);
        let x0 = p.get("backbone.w").unwrap().data()[1];
        let g1 = g["backbone.w"].data()[1];
        opt.step(&mut p, &g, |r| r == Role::Backbone).unwrap();
        opt.step(&mut p, &g, |r| r == Role::Backbone).unwrap();
        let want = x0 - 0.1 * g1 - 0.1 * (0.9 * g1 + g1);
        assert!((p.get("backbone.w").unwrap().data()[1] - want).abs() < 1e-12);
    }

    #[test]
    fn adam_first_step_matches_hand_formula() {
        let mut p = store();
        let g = grads(&["cvae.w"], &p);
        let before = p.get("cvae.w").unwrap().clone();
        let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
        Optimizer::adam(lr, b1, b2, eps).step(&mut p, &g, |r| r == Role::Cvae).unwrap();
        for i in 0..2 {
            let gi = g["cvae.w"].data()[i];
            let m = (1.0 - b1) * gi / (1.0 - b1);
            let v = (1.0 - b2) * gi * gi / (1.0 - b2);
            let want = before.data()[i] - lr * m / (v.sqrt() + eps);
            assert!((p.get("cvae.w").unwrap().data()[i] - want).abs() < 1e-12);
            // Bias correction makes the first step about lr * sign(g).
            assert!(((before.data()[i] - want).abs() - lr).abs() < 1e-7);
        }
    }

    #[test]
    fn frozen_and_missing_gradients_are_rejected() {
        let mut p = store();
        let before = p.clone();
        let g = grads(&["backbone.w", "cvae.w"], &p);
        let mut opt = Optimizer::sgd(0.1, 0.0);
        assert!(matches!(opt.step(&mut p, &g, |r| r == Role::Cvae), Err(Error::Invariant(_))));
        let g = grads(&["backbone.w"], &p);
        assert!(matches!(opt.step(&mut p, &g, |_| true), Err(Error::Invariant(_))));
        assert_eq!(p, before);
        assert_eq!(opt.steps(), 0);
    }
}

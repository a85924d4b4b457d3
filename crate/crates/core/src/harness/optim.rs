//! Adam over a [`ParamStore`].

use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

use super::config::OptimizerConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: OptimizerConfig,
    pub step: u64,
    /// First and second moments, one per store entry.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: OptimizerConfig, store: &ParamStore) -> Self {
        let zeros = || store.entries().iter().map(|e| Tensor::zeros(e.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One bias-corrected update of every trainable entry that received a
    /// gradient; entries without one are left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore, bound: &Bound<'_>, mut grads: Gradients) -> Result<()> {
        if bound.vars().len() != self.m.len() || store.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let OptimizerConfig {
            learning_rate: lr,
            beta1: b1,
            beta2: b2,
            eps,
        } = self.config;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            if !store.entries()[i].trainable {
                continue;
            }
            let Some(g) = grads.take(bound.get(id)) else {
                continue;
            };
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap(), true).unwrap();
        let frozen = store.add("f", Tensor::scalar(3.0), false).unwrap();
        let mut opt = Adam::new(OptimizerConfig::default(), &store);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let loss = p.get(id).square().sum().add(p.get(frozen).sum()).unwrap();
        let g = tape.backward(loss).unwrap();
        opt.step(&mut store, &p, g).unwrap();
        // bias-corrected first step is lr * sign(g)
        let w = store.get(id).data();
        assert!((w[0] - (1.0 - 1e-3)).abs() < 1e-10);
        assert!((w[1] - (-1.0 + 1e-3)).abs() < 1e-10);
        assert_eq!(store.get(frozen).data(), &[3.0]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::new(vec![1], vec![2.0]).unwrap(), true).unwrap();
        let mut opt = Adam::new(
            OptimizerConfig {
                learning_rate: 0.05,
                ..Default::default()
            },
            &store,
        );
        for _ in 0..500 {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let loss = p.get(id).add_scalar(-0.5).square().sum();
            let g = tape.backward(loss).unwrap();
            opt.step(&mut store, &p, g).unwrap();
        }
        assert!((store.get(id).data()[0] - 0.5).abs() < 1e-2);
    }
}

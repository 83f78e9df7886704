use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates for every parameter of one store.
#[derive(Clone, Debug)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Option<Tensor<S>>>,
    v: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Bias-corrected Adam update of every trainable parameter. Gradients are
    /// cleared afterwards.
    pub fn step(&mut self, store: &mut ParamStore<S>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.trainable && p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let (b1, b2) = (S::of(c.beta1), S::of(c.beta2));
        let bc1 = S::of(1.0 - c.beta1.powi(t));
        let bc2 = S::of(1.0 - c.beta2.powi(t));
        let (lr, eps) = (S::of(c.lr), S::of(c.eps));
        for (i, p) in store.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let g = p.grad.take().expect("checked above");
            let m = self.m[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Tensor::zeros(g.shape()));
            for (((w, &gv), mv), vv) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        store.clear_grads();
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(w: f64) -> (ParamStore<f64>, crate::numerics::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::scalar(w)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_is_identity_and_counts_step() {
        let (mut s, id) = scalar_store(0.37);
        s.get_mut(id).grad = Some(Tensor::scalar(0.0));
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut s).unwrap();
        assert_eq!(s.value(id).data()[0], 0.37);
        assert_eq!(adam.step, 1);
        assert!(s.get(id).grad.is_none());
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let (mut s, id) = scalar_store(1.0);
        s.get_mut(id).grad = Some(Tensor::scalar(1.0));
        let mut adam = AdamState::new(AdamConfig::default());
        adam.step(&mut s).unwrap();
        assert!((s.value(id).data()[0] - (1.0 - 1e-4)).abs() < 1e-6);
    }

    #[test]
    fn repeated_gradient_descends_monotonically() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = AdamState::new(AdamConfig::default());
        let mut prev = 1.0;
        for _ in 0..2 {
            s.get_mut(id).grad = Some(Tensor::scalar(0.5));
            adam.step(&mut s).unwrap();
            let w = s.value(id).data()[0];
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn missing_grad_names_parameter() {
        let (mut s, _) = scalar_store(1.0);
        let err = AdamState::new(AdamConfig::default()).step(&mut s).unwrap_err();
        assert!(err.to_string().contains("`w`"), "{err}");
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add_frozen("fixed", Tensor::scalar(2.0)).unwrap();
        AdamState::new(AdamConfig::default()).step(&mut s).unwrap();
        assert_eq!(s.value(id).data()[0], 2.0);
    }
}

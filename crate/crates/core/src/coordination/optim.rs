use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::real::Real;

/// Adam with decoupled weight decay and bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    /// First and second moments per parameter name.
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> &BTreeMap<String, (Vec<T>, Vec<T>)> {
        &self.moments
    }

    /// Restores optimizer state from a checkpoint.
    pub fn restore(&mut self, step: u64, moments: BTreeMap<String, (Vec<T>, Vec<T>)>) {
        self.step = step;
        self.moments = moments;
    }

    /// One update of every parameter from its accumulated gradient, then
    /// zeroes the gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let corr1 = T::lit(1.0 - self.beta1.powi(t));
        let corr2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let decay = T::lit(1.0 - self.lr * self.weight_decay);
        let eps = T::lit(self.eps);
        for (name, param) in store.iter_mut() {
            let n = param.tensor.numel();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            let (data, grad) = param.tensor.data_and_grad_mut();
            let grad = grad.ok_or_else(|| Error::validation("param", format!("{name} is not trainable")))?;
            for i in 0..n {
                let g = grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let mhat = m[i] / corr1;
                let vhat = v[i] / corr2;
                data[i] = data[i] * decay - lr * mhat / (vhat.sqrt() + eps);
                grad[i] = T::zero();
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::slicing::AxisRole;
    use crate::tensor::Tensor;

    fn store(v: f64, g: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::new(vec![1], vec![v]).unwrap(), vec![AxisRole::Fixed]).unwrap();
        s.get_mut("p").unwrap().tensor.grad_mut().unwrap()[0] = g;
        s
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut s = store(0.7, 0.0);
        let mut opt = AdamW::new(1e-3, 0.0, 0.9, 0.999, 1e-8);
        opt.step(&mut s).unwrap();
        assert_eq!(s.get("p").unwrap().tensor.data()[0], 0.7);
    }

    #[test]
    fn single_step_matches_hand_calculation() {
        // m = 0.05, v = 0.00025, mhat = 0.5, vhat = 0.25
        // p = 1 * (1 - 0.1 * 0.01) - 0.1 * 0.5 / (0.5 + 1e-8)
        let mut s = store(1.0, 0.5);
        let mut opt = AdamW::new(0.1, 0.01, 0.9, 0.999, 1e-8);
        opt.step(&mut s).unwrap();
        let expected = 0.999 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((s.get("p").unwrap().tensor.data()[0] - expected).abs() < 1e-15);
        assert_eq!(s.get("p").unwrap().tensor.grad().unwrap()[0], 0.0);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn decay_only_shrinks_multiplicatively() {
        let mut s = store(2.0, 0.0);
        let mut opt = AdamW::new(0.01, 0.5, 0.9, 0.999, 1e-8);
        opt.step(&mut s).unwrap();
        assert!((s.get("p").unwrap().tensor.data()[0] - 2.0 * (1.0 - 0.005)).abs() < 1e-15);
    }
}

//! Adam with bias correction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        Self::new(0.9, 0.999, 1e-8)
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self { beta1, beta2, eps, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update of every parameter that has a gradient.
    ///
    /// Moments are created lazily on first sight of a parameter name.
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be non-negative, got {lr}")));
        }
        for (name, g) in grads {
            let p = params.get(name).ok_or_else(|| Error::UnknownBinding(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::InvalidShape(format!("gradient for `{name}` has shape {:?}, parameter {:?}", g.shape(), p.shape())));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut()).zip(v.data_mut().iter_mut()) {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let m_hat = *mv / bc1;
                let v_hat = *vv / bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Convenience wrapper over [`AdamState::step`].
pub fn adam_step(params: &mut BTreeMap<String, Tensor>, grads: &BTreeMap<String, Tensor>, state: &mut AdamState, lr: f64) -> Result<()> {
    state.step(params, grads, lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: f64) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), Tensor::scalar(v))])
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = BTreeMap::from([("w".to_string(), Tensor::vector(vec![1.0, -2.0]))]);
        let g = BTreeMap::from([("w".to_string(), Tensor::zeros(&[2]))]);
        let mut s = AdamState::default();
        for _ in 0..10 {
            adam_step(&mut p, &g, &mut s, 0.1).unwrap();
        }
        assert_eq!(p["w"].data(), &[1.0, -2.0]);
        assert_eq!(s.step_count(), 10);
    }

    #[test]
    fn first_step_magnitude_is_lr() {
        // t=1: m̂ = g, v̂ = g², update = lr·g/(|g|+ε).
        let mut p = one("x", 1.0);
        let mut s = AdamState::default();
        adam_step(&mut p, &one("x", 1.0), &mut s, 0.01).unwrap();
        let expected = 1.0 - 0.01 * 1.0 / (1.0 + 1e-8);
        assert!((p["x"].data()[0] - expected).abs() < 1e-15);
        assert!((p["x"].data()[0] - 0.99).abs() < 1e-9);
    }

    #[test]
    fn converges_on_quadratic() {
        let mut p = one("x", 0.0);
        let mut s = AdamState::default();
        for _ in 0..1000 {
            let x = p["x"].data()[0];
            adam_step(&mut p, &one("x", 2.0 * (x - 5.0)), &mut s, 0.05).unwrap();
        }
        assert!((p["x"].data()[0] - 5.0).abs() < 1e-2);
    }

    #[test]
    fn shape_mismatch_is_error() {
        let mut p = one("x", 0.0);
        let g = BTreeMap::from([("x".to_string(), Tensor::zeros(&[2]))]);
        assert!(adam_step(&mut p, &g, &mut AdamState::default(), 0.1).is_err());
    }
}

//! Bias-corrected Adam.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates per parameter, zero before step 1.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    pub step: u64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Element> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter with a gradient entry.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if p.shape() != g.shape() {
                return Err(Error::shape("adam_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let c = self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let bc1 = T::lit(1.0 - c.beta1.powf(self.step as f64));
        let bc2 = T::lit(1.0 - c.beta2.powf(self.step as f64));
        let (lr, eps) = (T::lit(c.lr), T::lit(c.eps));
        for (name, g) in grads {
            let p = params.get_mut(name)?;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![T::zero(); g.numel()]);
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> (ParamStore<f64>, BTreeMap<String, Tensor<f64>>) {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0));
        let mut g = BTreeMap::new();
        g.insert("w".to_string(), Tensor::scalar(v));
        (s, g)
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut s, g) = one(0.0);
        let mut adam = Adam::new(AdamConfig::new(1e-3));
        for _ in 0..5 {
            adam.step(&mut s, &g).unwrap();
        }
        assert_eq!(s.get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn first_step_closed_form() {
        // m̂ = g, v̂ = g², so Δ = -lr·g/(|g| + eps).
        let (mut s, g) = one(-0.3);
        let mut adam = Adam::new(AdamConfig::new(0.01));
        adam.step(&mut s, &g).unwrap();
        let expect = 1.0 - 0.01 * -0.3 / (0.3 + 1e-8);
        assert!((s.get("w").unwrap().item() - expect).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let (mut s, mut g) = one(1.0);
        g.insert("w".into(), Tensor::zeros([2]));
        assert!(Adam::new(AdamConfig::new(0.1)).step(&mut s, &g).is_err());
    }
}

//! AdamW with decoupled weight decay and global-norm gradient clipping.

use std::collections::BTreeMap;

use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient norm ceiling; `None` disables clipping.
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: Some(1.0),
        }
    }
}

impl AdamWConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            out.push(format!("optim.lr must be finite and >= 0, got {}", self.lr));
        }
        for (name, b) in [("optim.beta1", self.beta1), ("optim.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                out.push(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            out.push(format!("optim.eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay >= 0.0) {
            out.push(format!("optim.weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0) {
                out.push(format!("optim.clip must be positive, got {c}"));
            }
        }
        out
    }
}

#[derive(Clone, Debug)]
struct Moments {
    m: Tensor,
    v: Tensor,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &AdamWConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from `grads`; returns the pre-clipping global norm.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in params.trainable() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        let scale = match self.config.max_grad_norm {
            Some(c) if norm > c => c / (norm + 1e-6),
            _ => 1.0,
        };

        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, var) in params.trainable() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            let g = if scale != 1.0 { g.affine(scale, 0.0)? } else { g.clone() };
            let entry = match self.moments.get(name) {
                Some(e) => e.clone(),
                None => Moments {
                    m: g.zeros_like()?,
                    v: g.zeros_like()?,
                },
            };
            let m = ((entry.m * c.beta1)? + (&g * (1.0 - c.beta1))?)?;
            let v = ((entry.v * c.beta2)? + (g.sqr()? * (1.0 - c.beta2))?)?;
            let m_hat = (&m / bc1)?;
            let v_hat = (&v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + c.eps)?)?;
            let w = var.as_tensor();
            let next = ((w * (1.0 - c.lr * c.weight_decay))? - (update * c.lr)?)?;
            var.set(&next)?;
            self.moments.insert(name.to_string(), Moments { m, v });
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn store_with(values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new(DType::F64, Device::Cpu);
        let n = values.len();
        s.insert("w", values, &[n], true).unwrap();
        s
    }

    #[test]
    fn first_step_moves_by_lr() {
        let store = store_with(vec![1.0, -2.0]);
        let w = store.get("w").unwrap().var.clone();
        let loss = (w.as_tensor() * 3.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            max_grad_norm: None,
            lr: 0.1,
            ..Default::default()
        });
        opt.step(&store, &grads).unwrap();
        let v = w.as_tensor().to_vec1::<f64>().unwrap();
        // bias-corrected first step is lr·sign(g) up to eps
        assert!((v[0] - 0.9).abs() < 1e-7);
        assert!((v[1] + 2.1).abs() < 1e-7);
    }

    #[test]
    fn zero_lr_is_a_no_op() {
        let store = store_with(vec![0.3, 0.7, -1.1]);
        let w = store.get("w").unwrap().var.clone();
        let before = w.as_tensor().to_vec1::<f64>().unwrap();
        let grads = w.as_tensor().sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() });
        opt.step(&store, &grads).unwrap();
        assert_eq!(w.as_tensor().to_vec1::<f64>().unwrap(), before);
    }

    #[test]
    fn clipping_reports_raw_norm() {
        let store = store_with(vec![0.0, 0.0]);
        let w = store.get("w").unwrap().var.clone();
        let probe = Tensor::new(&[30f64, 40.], &Device::Cpu).unwrap();
        let grads = (w.as_tensor() * probe).unwrap().sum_all().unwrap().backward().unwrap();
        let mut opt = AdamW::new(AdamWConfig::default());
        let norm = opt.step(&store, &grads).unwrap();
        assert!((norm - 50.0).abs() < 1e-12);
    }
}

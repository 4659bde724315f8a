use candle_core::{Tensor, Var};
use candle_nn::Optimizer;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// Cosine decay from `base` at step 0 to zero at `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * base * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Decoupled-weight-decay Adam settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// AdamW over an explicit parameter subset; everything else stays untouched.
pub struct AdamW {
    inner: candle_nn::AdamW,
    vars: Vec<Var>,
}

impl AdamW {
    pub fn new(vars: Vec<Var>, cfg: AdamWConfig) -> Result<Self> {
        let params = candle_nn::ParamsAdamW {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        };
        Ok(AdamW { inner: candle_nn::AdamW::new(vars.clone(), params)?, vars })
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.inner.set_learning_rate(lr);
    }

    pub fn step(&mut self, loss: &Tensor) -> Result<()> {
        self.inner.backward_step(loss)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 10), 0.1);
        assert!((cosine_lr(0.1, 5, 10) - 0.05).abs() < 1e-12);
        assert!(cosine_lr(0.1, 10, 10).abs() < 1e-12);
        assert!(cosine_lr(0.1, 20, 10).abs() < 1e-12);
    }

    #[test]
    fn only_listed_vars_move() {
        let a = Var::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let b = Var::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let mut opt = AdamW::new(vec![a.clone()], AdamWConfig { lr: 0.1, ..Default::default() }).unwrap();
        let loss = ((a.as_tensor() - 1.0).unwrap().sqr().unwrap() + (b.as_tensor() - 1.0).unwrap().sqr().unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        opt.step(&loss).unwrap();
        assert!(a.to_vec1::<f64>().unwrap().iter().all(|v| *v > 0.0));
        assert_eq!(b.to_vec1::<f64>().unwrap(), vec![0.0; 3]);
    }
}

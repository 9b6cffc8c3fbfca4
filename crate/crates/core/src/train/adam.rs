use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; off when `None`.
    pub clip_norm: Option<f64>,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: None,
        }
    }
}

/// Adam with bias correction and no weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamSet<f32>) -> Self {
        Self {
            cfg,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<f32>, grads: &[Tensor<f32>]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Shape(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        let scale = match self.cfg.clip_norm {
            Some(max) => {
                let norm = grads
                    .iter()
                    .flat_map(|g| g.data())
                    .map(|&x| (x as f64) * (x as f64))
                    .sum::<f64>()
                    .sqrt();
                if norm > max {
                    max / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] as f64 * scale;
                let mj = c.beta1 * m[j] as f64 + (1.0 - c.beta1) * gj;
                let vj = c.beta2 * v[j] as f64 + (1.0 - c.beta2) * gj * gj;
                m[j] = mj as f32;
                v[j] = vj as f32;
                let update = c.lr * (mj / bc1) / ((vj / bc2).sqrt() + c.eps);
                *w = (*w as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_the_gradient_sign() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(vec![3], vec![1.0, 1.0, 1.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::with_lr(0.1), &ps);
        let g = vec![Tensor::new(vec![3], vec![2.0, -0.5, 0.0]).unwrap()];
        opt.step(&mut ps, &g).unwrap();
        let w = ps.tensors()[0].data();
        assert!((w[0] - 0.9).abs() < 1e-6);
        assert!((w[1] - 1.1).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let mut opt = Adam::new(AdamConfig::with_lr(0.05), &ps);
        for _ in 0..500 {
            let g: Vec<f32> = ps.tensors()[0].data().iter().map(|&x| 2.0 * x).collect();
            opt.step(&mut ps, &[Tensor::new(vec![2], g).unwrap()]).unwrap();
        }
        assert!(ps.tensors()[0].data().iter().all(|x| x.abs() < 1e-2));
    }

    #[test]
    fn clipping_bounds_the_effective_gradient() {
        let mut ps = ParamSet::new();
        ps.add("w", Tensor::new(vec![1], vec![0.0]).unwrap());
        let mut cfg = AdamConfig::with_lr(1.0);
        cfg.clip_norm = Some(1.0);
        let mut opt = Adam::new(cfg, &ps);
        opt.step(&mut ps, &[Tensor::new(vec![1], vec![100.0]).unwrap()]).unwrap();
        assert!((opt.m[0].data()[0] - 0.1).abs() < 1e-6);
    }
}

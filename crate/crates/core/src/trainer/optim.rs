//! Momentum SGD and Adam over named parameters.

use std::f64::consts::PI;

use crate::error::{bail, Result};
use crate::nn::Param;
use crate::trainer::config::OptimizerKind;

const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Cosine decay from `base` to 0 over `total` steps.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = (step.min(total)) as f64 / total as f64;
    base * 0.5 * (1.0 + (PI * t).cos())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Steps taken so far.
    pub t: u64,
    /// First moment (velocity for SGD), one per parameter, in parameter order.
    pub m: Vec<Vec<f32>>,
    /// Second moment; empty for SGD.
    pub v: Vec<Vec<f32>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, momentum: f64, weight_decay: f64, params: &[&Param]) -> Self {
        let zeros: Vec<Vec<f32>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
        Self {
            kind,
            momentum,
            weight_decay,
            t: 0,
            v: match kind {
                OptimizerKind::Adaptive => zeros.clone(),
                OptimizerKind::SgdMomentum => Vec::new(),
            },
            m: zeros,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Param], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            bail!(
                Checkpoint,
                "optimizer holds state for {} parameters, model has {}",
                self.m.len(),
                params.len()
            );
        }
        self.t += 1;
        let wd = self.weight_decay as f32;
        match self.kind {
            OptimizerKind::SgdMomentum => {
                let (mu, lr) = (self.momentum as f32, lr as f32);
                for (p, m) in params.iter_mut().zip(&mut self.m) {
                    for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(m.iter_mut()) {
                        *v = mu * *v + g + wd * *w;
                        *w -= lr * *v;
                    }
                }
            }
            OptimizerKind::Adaptive => {
                let b1 = self.momentum;
                let c1 = 1.0 - b1.powi(self.t as i32);
                let c2 = 1.0 - BETA2.powi(self.t as i32);
                let step = (lr * c2.sqrt() / c1) as f32;
                let (b1, b2, eps) = (b1 as f32, BETA2 as f32, (ADAM_EPS * c2.sqrt()) as f32);
                for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
                    for (((w, g), m), v) in p
                        .value
                        .iter_mut()
                        .zip(&p.grad)
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        let g = g + wd * *w;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= step * *m / (v.sqrt() + eps);
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

    fn param(v: f32, g: f32) -> Param {
        let mut p = Param::filled("p", &[1], v);
        p.grad[0] = g;
        p
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0.1, 0, 100), 0.1);
        assert!((cosine_lr(0.1, 50, 100) - 0.05).abs() < 1e-12);
        assert!(cosine_lr(0.1, 100, 100).abs() < 1e-12);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut p = param(1.0, 1.0);
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 0.9, 0.0, &[&p]);
        opt.step(&mut [&mut p], 0.1).unwrap();
        assert!((p.value[0] - 0.9).abs() < 1e-7);
        opt.step(&mut [&mut p], 0.1).unwrap();
        // v = 0.9 + 1 = 1.9
        assert!((p.value[0] - 0.71).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = param(1.0, 0.003);
        let mut opt = Optimizer::new(OptimizerKind::Adaptive, 0.9, 0.0, &[&p]);
        opt.step(&mut [&mut p], 0.01).unwrap();
        assert!((p.value[0] - 0.99).abs() < 1e-5, "{}", p.value[0]);
    }

    #[test]
    fn zero_lr_keeps_weights() {
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::Adaptive] {
            let mut p = param(0.5, 2.0);
            let mut opt = Optimizer::new(kind, 0.9, 0.01, &[&p]);
            opt.step(&mut [&mut p], 0.0).unwrap();
            assert_eq!(p.value[0], 0.5);
        }
    }
}

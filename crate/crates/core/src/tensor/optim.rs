//! Adam with decoupled weight decay and a warm-up + cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

/// Linear warm-up to `base_lr` over `warmup_ratio · total_steps` steps, then
/// cosine decay towards zero at `total_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f32,
    pub warmup_ratio: f32,
    pub total_steps: usize,
}

impl Schedule {
    pub fn constant(base_lr: f32) -> Self {
        Self {
            base_lr,
            warmup_ratio: 0.0,
            total_steps: 0,
        }
    }

    pub fn warmup_steps(&self) -> usize {
        // f32 ratios such as 0.05 are not exact; snap near-integers before ceil.
        let x = self.warmup_ratio as f64 * self.total_steps as f64;
        let r = x.round();
        if (x - r).abs() < 1e-4 { r as usize } else { x.ceil() as usize }
    }

    pub fn lr(&self, step: usize) -> f32 {
        if self.total_steps == 0 {
            return self.base_lr.max(0.0);
        }
        let warm = self.warmup_steps();
        let factor = if step < warm {
            (step + 1) as f64 / warm as f64
        } else {
            let span = (self.total_steps - warm).max(1) as f64;
            let progress = ((step - warm) as f64 / span).min(1.0);
            0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        };
        (self.base_lr as f64 * factor).max(0.0) as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub schedule: Schedule,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl AdamConfig {
    pub fn new(schedule: Schedule, weight_decay: f32) -> Self {
        Self {
            schedule,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

impl Default for AdamConfig {
    /// Base rate 1e-3, 5% warm-up, weight decay 0.05.
    fn default() -> Self {
        Self::new(
            Schedule {
                base_lr: 1e-3,
                warmup_ratio: 0.05,
                total_steps: 0,
            },
            0.05,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { step: usize, lr: f32 },
    /// A gradient contained NaN/Inf; no parameter was touched.
    Skipped { step: usize, param: usize },
}

#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub step: usize,
    pub config: AdamConfig,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            step: 0,
            config,
            first: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            second: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn current_lr(&self) -> f32 {
        self.config.schedule.lr(self.step)
    }

    /// One Adam update from the `grad` stored on each parameter. Parameters
    /// without a stored gradient are left untouched.
    pub fn adam_step(&mut self, params: &mut [&mut Tensor]) -> Result<StepOutcome> {
        if params.len() != self.first.len() {
            return Err(Error::Invalid(format!(
                "optimizer tracks {} parameters, got {}",
                self.first.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.numel() != self.first[i].len() {
                return Err(Error::shape("adam_step", p.dims(), &[self.first[i].len()]));
            }
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Ok(StepOutcome::Skipped {
                        step: self.step,
                        param: i,
                    });
                }
            }
        }

        let cfg = &self.config;
        let lr = cfg.schedule.lr(self.step);
        let t = (self.step + 1) as i32;
        let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
        let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
        let decay = 1.0 - lr * cfg.weight_decay;

        for (i, p) in params.iter_mut().enumerate() {
            let Some(grad) = p.grad().map(<[f32]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                let update = (m_hat / (v_hat.sqrt() + cfg.eps as f64)) as f32;
                *w = *w * decay - lr * update;
            }
        }
        self.step += 1;
        Ok(StepOutcome::Applied {
            step: self.step - 1,
            lr,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad_step(w: &mut Tensor, state: &mut OptimizerState, target: f32) {
        let g = 2.0 * (w.data()[0] - target);
        w.set_grad(vec![g]).unwrap();
        state.adam_step(&mut [w]).unwrap();
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut w = Tensor::new(vec![3], vec![1.0, -2.0, 0.25]).unwrap().into_param();
        let before = w.data().to_vec();
        let mut state = OptimizerState::new(AdamConfig::new(Schedule::constant(0.1), 0.0), &[&w]);
        for _ in 0..5 {
            w.set_grad(vec![0.0; 3]).unwrap();
            state.adam_step(&mut [&mut w]).unwrap();
        }
        assert_eq!(w.data(), before.as_slice());
    }

    #[test]
    fn one_step_descends_on_square() {
        let mut w = Tensor::scalar(1.0).into_param();
        let mut state = OptimizerState::new(AdamConfig::new(Schedule::constant(0.1), 0.0), &[&w]);
        quad_step(&mut w, &mut state, 0.0);
        assert!(w.item() < 1.0);
    }

    #[test]
    fn converges_on_shifted_quadratic() {
        let schedule = Schedule {
            base_lr: 0.1,
            warmup_ratio: 0.0,
            total_steps: 200,
        };
        let mut w = Tensor::scalar(0.0).into_param();
        let mut state = OptimizerState::new(AdamConfig::new(schedule, 0.0), &[&w]);
        for _ in 0..200 {
            quad_step(&mut w, &mut state, 2.0);
        }
        assert!((w.item() - 2.0).abs() < 1e-2, "w = {}", w.item());
    }

    #[test]
    fn non_finite_gradient_skips_step() {
        let mut w = Tensor::scalar(1.0).into_param();
        let mut state = OptimizerState::new(AdamConfig::default(), &[&w]);
        w.set_grad(vec![f32::NAN]).unwrap();
        let out = state.adam_step(&mut [&mut w]).unwrap();
        assert_eq!(out, StepOutcome::Skipped { step: 0, param: 0 });
        assert_eq!(w.item(), 1.0);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let s = Schedule {
            base_lr: 1e-3,
            warmup_ratio: 0.05,
            total_steps: 1000,
        };
        assert_eq!(s.warmup_steps(), 50);
        assert!(s.lr(0) < s.lr(49));
        assert!((s.lr(49) - 1e-3).abs() < 1e-9);
        assert!(s.lr(500) < s.lr(100));
        assert!((0..2000).all(|t| s.lr(t) >= 0.0));
        assert_eq!(s.lr(1000), 0.0);
    }
}

//! AdamW with decoupled weight decay and a linear warmup-then-decay
//! learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{HypeError, Result};
use crate::model::Param;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSpec {
    pub peak_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl ScheduleSpec {
    /// Linear ramp 0 -> peak over warmup, then linear decay peak -> 0.
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step > self.total_steps {
            return Err(HypeError::Usage(format!(
                "step {} past total_steps {}",
                step, self.total_steps
            )));
        }
        if self.warmup_steps > self.total_steps || self.peak_lr <= 0.0 {
            return Err(HypeError::Config(format!(
                "invalid schedule: warmup {} / total {} / peak {}",
                self.warmup_steps, self.total_steps, self.peak_lr
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.peak_lr * step as f64 / self.warmup_steps as f64);
        }
        if self.total_steps == self.warmup_steps {
            return Ok(if step == self.total_steps { 0.0 } else { self.peak_lr });
        }
        Ok(self.peak_lr * (self.total_steps - step) as f64
            / (self.total_steps - self.warmup_steps) as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// When set, weight decay also hits biases and layer-norm affines.
    pub decay_all: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-5,
            weight_decay: 0.1,
            decay_all: false,
        }
    }
}

/// AdamW state: step counter plus first/second moments per parameter,
/// all zero at t = 0.
pub struct AdamW {
    config: OptimizerConfig,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &[Param], config: OptimizerConfig) -> AdamW {
        AdamW {
            config,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.tensor.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update; decoupled decay `lr * wd * theta` is
    /// subtracted separately from the Adam term. Missing gradients are
    /// treated as zero.
    pub fn step(&mut self, params: &[Param], lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(HypeError::Dimension {
                op: "adamw_step",
                lhs: vec![params.len()],
                rhs: vec![self.m.len()],
            });
        }
        self.t += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, p) in params.iter().enumerate() {
            let grad = p.tensor.grad();
            if let Some(g) = &grad {
                if g.len() != p.tensor.len() {
                    return Err(HypeError::Dimension {
                        op: "adamw_step",
                        lhs: vec![p.tensor.len()],
                        rhs: vec![g.len()],
                    });
                }
            }
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let wd = if p.decay || c.decay_all { c.weight_decay } else { 0.0 };
            p.tensor.update_data(|data| {
                for j in 0..data.len() {
                    let g = grad.as_ref().map_or(0.0, |g| g[j]);
                    m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g;
                    v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g * g;
                    let m_hat = m[j] / bc1;
                    let v_hat = v[j] / bc2;
                    data[j] -= lr * (m_hat / (v_hat.sqrt() + c.eps) + wd * data[j]);
                }
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar_param(v: f64, decay: bool) -> Param {
        Param {
            name: "w".into(),
            tensor: Tensor::param(&[1], vec![v]),
            decay,
        }
    }

    #[test]
    fn schedule_boundaries() {
        let s = ScheduleSpec {
            peak_lr: 1e-5,
            warmup_steps: 10,
            total_steps: 100,
        };
        assert_eq!(s.lr_at(10).unwrap(), 1e-5);
        assert_eq!(s.lr_at(100).unwrap(), 0.0);
        assert!(s.lr_at(101).is_err());
    }

    #[test]
    fn schedule_midpoint_matches_linear_interpolation() {
        let s = ScheduleSpec {
            peak_lr: 1e-5,
            warmup_steps: 10,
            total_steps: 100,
        };
        let expect = 1e-5 * (100.0 - 55.0) / 90.0;
        assert_eq!(s.lr_at(55).unwrap(), expect);
        assert!((s.lr_at(55).unwrap() - 5e-6).abs() < 1e-20);
    }

    #[test]
    fn schedule_is_piecewise_linear_with_peak_max() {
        let s = ScheduleSpec {
            peak_lr: 3e-4,
            warmup_steps: 7,
            total_steps: 50,
        };
        let values: Vec<f64> = (0..=50).map(|t| s.lr_at(t).unwrap()).collect();
        let max = values.iter().cloned().fold(0.0, f64::max);
        assert_eq!(max, 3e-4);
        // continuity: adjacent steps differ by one of the two slopes
        for w in values.windows(2) {
            let d = (w[1] - w[0]).abs();
            let up = 3e-4 / 7.0;
            let down = 3e-4 / 43.0;
            assert!((d - up).abs() < 1e-18 || (d - down).abs() < 1e-18);
        }
    }

    #[test]
    fn zero_grad_zero_decay_leaves_params_unchanged() {
        let p = scalar_param(1.5, true);
        p.tensor.zero_grad();
        let mut opt = AdamW::new(
            std::slice::from_ref(&p),
            OptimizerConfig {
                weight_decay: 0.0,
                ..Default::default()
            },
        );
        opt.step(std::slice::from_ref(&p), 1e-3).unwrap();
        assert_eq!(p.tensor.to_vec(), vec![1.5]);
    }

    #[test]
    fn decoupling_with_zero_grad_is_exactly_lr_wd_theta() {
        let p = scalar_param(2.0, true);
        let cfg = OptimizerConfig::default();
        let mut opt = AdamW::new(std::slice::from_ref(&p), cfg);
        opt.step(std::slice::from_ref(&p), 1e-2).unwrap();
        let expect = 2.0 - 1e-2 * 0.1 * 2.0;
        assert_eq!(p.tensor.to_vec(), vec![expect]);
    }

    #[test]
    fn first_step_matches_hand_unrolled_scalar() {
        let p = scalar_param(0.0, false);
        p.tensor.update_data(|_| {});
        // install grad = 1 by building a graph: loss = w * 1
        let one = Tensor::new(&[1], vec![1.0]);
        p.tensor.mul(&one).unwrap().sum().backward().unwrap();
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(std::slice::from_ref(&p), cfg);
        opt.step(std::slice::from_ref(&p), 1e-3).unwrap();
        let expect = -1e-3 * (1.0 / (1.0 + 1e-5));
        assert!((p.tensor.to_vec()[0] - expect).abs() < 1e-18);
        assert!((p.tensor.to_vec()[0] - -9.9999000009999e-4).abs() < 1e-12);
    }

    #[test]
    fn two_steps_match_hand_unrolled_trace() {
        // theta0 = 0.5, constant gradient 0.2, lr 1e-3, wd 0.
        let (b1, b2, eps, lr, g) = (0.9, 0.99, 1e-5, 1e-3, 0.2);
        let mut theta = 0.5;
        let (mut m, mut v) = (0.0, 0.0);
        let mut expected = Vec::new();
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - f64::powi(b1, t));
            let vh = v / (1.0 - f64::powi(b2, t));
            theta -= lr * mh / (vh.sqrt() + eps);
            expected.push(theta);
        }

        let p = scalar_param(0.5, false);
        let cfg = OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut opt = AdamW::new(std::slice::from_ref(&p), cfg);
        for step_expect in &expected {
            p.tensor.zero_grad();
            let c = Tensor::new(&[1], vec![g]);
            p.tensor.mul(&c).unwrap().sum().backward().unwrap();
            opt.step(std::slice::from_ref(&p), lr).unwrap();
            assert!((p.tensor.to_vec()[0] - step_expect).abs() < 1e-12);
        }
    }

    #[test]
    fn optimizer_is_deterministic() {
        let run = || {
            let p = scalar_param(1.0, true);
            let mut opt = AdamW::new(std::slice::from_ref(&p), OptimizerConfig::default());
            for _ in 0..5 {
                p.tensor.zero_grad();
                let c = Tensor::new(&[1], vec![0.3]);
                p.tensor.mul(&c).unwrap().sum().backward().unwrap();
                opt.step(std::slice::from_ref(&p), 2e-3).unwrap();
            }
            p.tensor.to_vec()[0].to_bits()
        };
        assert_eq!(run(), run());
    }
}

//! AdamW with decoupled weight decay and a linear-warmup cosine schedule.

use crate::error::{Error, Result};
use crate::tensor::ParamSet;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global-norm gradient clipping; off by default.
    #[serde(default)]
    pub max_grad_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            max_grad_norm: None,
        }
    }
}

impl AdamWConfig {
    /// Defaults used by the diffusion/LoRA pipeline.
    pub fn lora_default() -> Self {
        AdamWConfig {
            learning_rate: 1e-4,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1): got {}, {}",
                self.beta1, self.beta2
            )));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be positive: got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub peak_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
    pub min_lr: f64,
}

impl ScheduleConfig {
    pub fn new(peak_lr: f64, warmup_steps: u64, total_steps: u64) -> Self {
        ScheduleConfig {
            peak_lr,
            warmup_steps,
            total_steps,
            min_lr: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be < total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear ramp to `peak_lr` over warmup, then cosine decay to `min_lr`.
pub fn cosine_lr(step: u64, cfg: &ScheduleConfig) -> Result<f64> {
    cfg.validate()?;
    if step > cfg.total_steps {
        return Err(Error::Contract(format!(
            "schedule step {step} out of range 0..={}",
            cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.peak_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.min_lr
        + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Per-parameter first/second moment estimates.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW over a [`ParamSet`]. Frozen and non-trainable parameters are
/// never touched; gradients are cleared after each applied step.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub state: BTreeMap<String, AdamState>,
    pub step_count: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            state: BTreeMap::new(),
            step_count: 0,
        }
    }

    /// One update with the configured learning rate.
    pub fn step(&mut self, params: &mut ParamSet) -> Result<()> {
        self.step_with_lr(params, self.cfg.learning_rate)
    }

    /// One update with an externally scheduled learning rate.
    ///
    /// Applies the bias-corrected Adam update plus decoupled decay
    /// `p <- p - lr * wd * p`, then zeroes the consumed gradients.
    pub fn step_with_lr(&mut self, params: &mut ParamSet, lr: f64) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);

        let clip_scale = match self.cfg.max_grad_norm {
            Some(max_norm) if max_norm > 0.0 => {
                let total_sq: f64 = params
                    .iter()
                    .filter(|p| p.is_updatable())
                    .filter_map(|p| p.tensor.grad.as_ref())
                    .flat_map(|g| g.iter().map(|v| v * v))
                    .sum();
                let norm = total_sq.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            _ => 1.0,
        };

        for p in params.iter_mut() {
            if !p.is_updatable() {
                continue;
            }
            let Some(mut grad) = p.tensor.grad.take() else {
                continue;
            };
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for parameter '{}'",
                    p.name
                )));
            }
            if clip_scale != 1.0 {
                for g in grad.iter_mut() {
                    *g *= clip_scale;
                }
            }
            let n = grad.len();
            let st = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| AdamState {
                    m: vec![0.0; n],
                    v: vec![0.0; n],
                });
            let data = p.tensor.data_mut();
            for i in 0..n {
                st.m[i] = self.cfg.beta1 * st.m[i] + (1.0 - self.cfg.beta1) * grad[i];
                st.v[i] = self.cfg.beta2 * st.v[i] + (1.0 - self.cfg.beta2) * grad[i] * grad[i];
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                let prev = data[i];
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                data[i] -= lr * self.cfg.weight_decay * prev;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(value: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.register("w", Tensor::full(&[1], value));
        ps
    }

    #[test]
    fn zero_grad_zero_decay_leaves_parameter_unchanged() {
        let mut ps = one_param(0.7);
        ps.get_mut("w").unwrap().tensor.accumulate_grad(&[0.0]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step_with_lr(&mut ps, 0.1).unwrap();
        assert_eq!(ps.get("w").unwrap().tensor.data(), &[0.7]);
    }

    #[test]
    fn first_step_with_unit_gradient_moves_by_lr() {
        // Hand derivation for t=1, g=1: m_hat = v_hat = 1, so the update
        // is -lr / (1 + eps).
        let mut ps = one_param(0.0);
        ps.get_mut("w").unwrap().tensor.accumulate_grad(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step_with_lr(&mut ps, 0.1).unwrap();
        let delta = ps.get("w").unwrap().tensor.data()[0];
        assert!((delta + 0.1).abs() < 1e-6, "delta {delta}");
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut ps = one_param(2.0);
        ps.get_mut("w").unwrap().tensor.accumulate_grad(&[0.0]);
        let cfg = AdamWConfig {
            weight_decay: 0.05,
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step_with_lr(&mut ps, 0.1).unwrap();
        let got = ps.get("w").unwrap().tensor.data()[0];
        assert!((got - (2.0 - 0.1 * 0.05 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn frozen_parameters_never_move() {
        let mut ps = one_param(1.0);
        ps.get_mut("w").unwrap().frozen = true;
        ps.get_mut("w").unwrap().tensor.accumulate_grad(&[5.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let before = ps.fingerprint_prefix("");
        opt.step_with_lr(&mut ps, 0.1).unwrap();
        assert_eq!(before, ps.fingerprint_prefix(""));
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut ps = one_param(1.0);
        ps.get_mut("w").unwrap().tensor.accumulate_grad(&[f64::NAN]);
        let mut opt = AdamW::new(AdamWConfig::default());
        let err = opt.step_with_lr(&mut ps, 0.1).unwrap_err();
        assert!(err.to_string().contains("'w'"), "{err}");
    }

    #[test]
    fn grads_are_cleared_after_apply() {
        let mut ps = one_param(1.0);
        ps.get_mut("w").unwrap().tensor.accumulate_grad(&[1.0]);
        let mut opt = AdamW::new(AdamWConfig::default());
        opt.step_with_lr(&mut ps, 0.1).unwrap();
        assert!(ps.get("w").unwrap().tensor.grad.is_none());
    }

    #[test]
    fn global_norm_clipping_rescales_gradients() {
        let mut ps = ParamSet::new();
        ps.register("w", Tensor::zeros(&[2]));
        ps.get_mut("w").unwrap().tensor.accumulate_grad(&[3.0, 4.0]); // norm 5
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step_with_lr(&mut ps, 0.1).unwrap();
        // First moment is (1 - beta1) * clipped gradient.
        let m = &opt.state["w"].m;
        assert!((m[0] - 0.1 * 0.6).abs() < 1e-15, "{m:?}");
        assert!((m[1] - 0.1 * 0.8).abs() < 1e-15, "{m:?}");
    }

    #[test]
    fn clipping_leaves_small_gradients_alone() {
        let mut ps = ParamSet::new();
        ps.register("w", Tensor::zeros(&[1]));
        ps.get_mut("w").unwrap().tensor.accumulate_grad(&[0.5]);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            max_grad_norm: Some(1.0),
            ..Default::default()
        };
        let mut opt = AdamW::new(cfg);
        opt.step_with_lr(&mut ps, 0.1).unwrap();
        assert!((opt.state["w"].m[0] - 0.1 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn cosine_schedule_hits_exact_endpoints_and_midpoint() {
        let cfg = ScheduleConfig::new(0.4, 100, 500);
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 0.0);
        assert_eq!(cosine_lr(100, &cfg).unwrap(), 0.4);
        // Midpoint of decay: cos(pi/2) = 0.
        let mid = cosine_lr(300, &cfg).unwrap();
        assert!((mid - 0.2).abs() < 1e-15);
        let end = cosine_lr(500, &cfg).unwrap();
        assert!(end.abs() < 1e-16);
    }

    #[test]
    fn cosine_schedule_rejects_out_of_range_step() {
        let cfg = ScheduleConfig::new(0.4, 100, 500);
        assert!(matches!(cosine_lr(501, &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn schedule_requires_warmup_below_total() {
        let cfg = ScheduleConfig::new(0.4, 500, 500);
        assert!(matches!(cosine_lr(0, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn schedule_is_continuous_and_monotone_after_warmup() {
        let cfg = ScheduleConfig::new(1.0, 50, 400);
        let at_warmup = cosine_lr(50, &cfg).unwrap();
        let just_before = cosine_lr(49, &cfg).unwrap();
        assert!((at_warmup - 1.0).abs() < 1e-15);
        assert!(just_before < at_warmup);
        let mut prev = at_warmup;
        for step in 51..=400 {
            let lr = cosine_lr(step, &cfg).unwrap();
            assert!(lr <= prev + 1e-15, "schedule rose at step {step}");
            prev = lr;
        }
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::ActionHeadKind;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_steps: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub loss: ActionHeadKind,
    pub seed: u64,
    /// Run the evaluation hook every this many steps (0 = never).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        TrainConfig {
            total_steps: 5000,
            warmup_steps: 200,
            peak_lr: 1e-3,
            final_lr: 1e-4,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: Some(1.0),
            loss: ActionHeadKind::Regression,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Large-model schedule: 5000 steps, 200 warmup, peak
    /// 2.5e-5 decaying to a tenth of that, batch 32.
    pub fn full_scale() -> Self {
        let peak = 2.5e-5;
        TrainConfig {
            peak_lr: peak,
            final_lr: peak / 10.0,
            batch_size: 32,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if self.warmup_steps >= self.total_steps && self.total_steps > 0 {
            return bad("warmup must be shorter than training");
        }
        if !(self.final_lr >= 0.0 && self.final_lr <= self.peak_lr && self.peak_lr.is_finite()) {
            return bad("need 0 <= final_lr <= peak_lr");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || !(self.eps > 0.0)
        {
            return bad("Adam hyperparameters out of range");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("gradient clip must be positive");
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `peak_lr`, then half-cosine decay to `final_lr`
/// at `total_steps`. Written as a convex blend so both endpoints are exact.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> f64 {
    let step = step.min(cfg.total_steps);
    if step < cfg.warmup_steps {
        return cfg.peak_lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = (cfg.total_steps - cfg.warmup_steps).max(1) as f64;
    let p = (step - cfg.warmup_steps) as f64 / span;
    let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    cfg.peak_lr * c + cfg.final_lr * (1.0 - c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_endpoints() {
        let cfg = TrainConfig::full_scale();
        assert_eq!(lr_at(0, &cfg), 0.0);
        assert_eq!(lr_at(200, &cfg), 2.5e-5);
        assert!((lr_at(5000, &cfg) - 2.5e-6).abs() < 1e-12);
        // the ramp formula, evaluated at the junction, meets the cosine branch
        let ramp = cfg.peak_lr * 200.0 / 200.0;
        assert!((ramp - lr_at(200, &cfg)).abs() < 1e-12);
        assert!((lr_at(199, &cfg) - lr_at(200, &cfg)).abs() < cfg.peak_lr / 199.0);
    }

    #[test]
    fn warmup_increases_then_decay_decreases() {
        let cfg = TrainConfig::default();
        for s in 1..cfg.warmup_steps {
            assert!(lr_at(s, &cfg) > lr_at(s - 1, &cfg));
        }
        for s in cfg.warmup_steps + 1..=cfg.total_steps {
            assert!(lr_at(s, &cfg) <= lr_at(s - 1, &cfg));
        }
        assert!((lr_at(cfg.total_steps, &cfg) - cfg.final_lr).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_steps: 6000,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            final_lr: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}

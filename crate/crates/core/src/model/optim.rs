use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::params::ModelParams;
use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl OptimizerConfig {
    /// Pretraining settings. `total_steps` is filled in by the trainer.
    pub fn pretrain_default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            weight_decay: 0.01,
            warmup_steps: 30_000,
            total_steps: 30_000,
        }
    }

    /// Fine-tuning settings.
    pub fn finetune_default() -> Self {
        Self {
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-16,
            weight_decay: 5e-3,
            warmup_steps: 100,
            total_steps: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(Error::Argument(format!(
                "beta1 must lie in [0, 1), got {}",
                self.beta1
            )));
        }
        if !(self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(Error::Argument(format!(
                "beta2 must lie in (0, 1), got {}",
                self.beta2
            )));
        }
        let non_negative = |x: f64| x >= 0.0;
        if !non_negative(self.epsilon) || !non_negative(self.weight_decay) {
            return Err(Error::Argument(
                "epsilon and weight_decay must be non-negative".into(),
            ));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::Argument(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to the peak rate, then linear decay to 0 at
/// `total_steps`. Steps past the end are clamped to 0.
pub fn lr_at(step: u64, ocfg: &OptimizerConfig) -> f64 {
    let peak = ocfg.learning_rate;
    let (w, t) = (ocfg.warmup_steps, ocfg.total_steps);
    if step >= t {
        return if step == t && w == t && t > 0 {
            peak
        } else {
            0.0
        };
    }
    if step < w {
        peak * step as f64 / w as f64
    } else {
        peak * (t - step) as f64 / (t - w) as f64
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ModelParams<T>) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One AdamW update at 1-based `step` with learning rate `lr`.
///
/// Decay `p ← p − lr·wd·p` touches embeddings and weight matrices only;
/// the bias-corrected Adam step follows. Nothing is modified when any
/// gradient is non-finite.
pub fn adamw_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    ocfg: &OptimizerConfig,
    step: u64,
    lr: f64,
) -> Result<()> {
    if step == 0 {
        return Err(Error::Argument("optimizer steps are 1-based".into()));
    }
    let grads = grads.tensors();
    if let Some(bad) = grads.iter().find(|g| g.data.iter().any(|v| !v.is_finite())) {
        return Err(Error::Training(format!(
            "non-finite gradient in {}",
            bad.name
        )));
    }
    let b1 = ocfg.beta1;
    let b2 = ocfg.beta2;
    let c1 = T::of(1.0 - b1.powf(step as f64));
    let c2 = T::of(1.0 - b2.powf(step as f64));
    let (b1, b2) = (T::of(b1), T::of(b2));
    let (one, eps, lr_t) = (T::one(), T::of(ocfg.epsilon), T::of(lr));
    let shrink = T::of(1.0 - lr * ocfg.weight_decay);

    let tensors = params
        .tensors_mut()
        .into_iter()
        .zip(grads)
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut());
    for (((p, g), m), v) in tensors {
        if p.shape != g.shape || p.shape != m.shape {
            return Err(Error::Argument(format!("shape mismatch in {}", p.name)));
        }
        let decays = p.kind.decays();
        for (((p, &g), m), v) in p
            .data
            .iter_mut()
            .zip(g.data)
            .zip(m.data.iter_mut())
            .zip(v.data.iter_mut())
        {
            *m = b1 * *m + (one - b1) * g;
            *v = b2 * *v + (one - b2) * g * g;
            if decays {
                *p *= shrink;
            }
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::config::ModelConfig;
    use crate::model::params::init_model;

    fn sched(w: u64, t: u64) -> OptimizerConfig {
        OptimizerConfig {
            warmup_steps: w,
            total_steps: t,
            ..OptimizerConfig::pretrain_default()
        }
    }

    #[test]
    fn schedule_shape() {
        let o = sched(30_000, 100_000);
        assert_eq!(lr_at(0, &o), 0.0);
        assert_eq!(lr_at(30_000, &o), 1e-4);
        assert!((lr_at(65_000, &o) - 5e-5).abs() < 1e-18);
        assert_eq!(lr_at(100_000, &o), 0.0);
        assert_eq!(lr_at(200_000, &o), 0.0);
        assert!((lr_at(15_000, &o) - 5e-5).abs() < 1e-18);
    }

    #[test]
    fn schedule_single_peak() {
        let o = sched(10, 50);
        let lrs: Vec<f64> = (0..=50).map(|s| lr_at(s, &o)).collect();
        let peak = lrs.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(lrs.iter().filter(|&&l| l == peak).count(), 1);
        assert_eq!(lrs[10], peak);
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() <= 1e-5 + 1e-18);
        }
    }

    #[test]
    fn config_validation() {
        assert!(sched(10, 5).validate().is_err());
        let bad = OptimizerConfig {
            beta2: 1.0,
            ..OptimizerConfig::finetune_default()
        };
        assert!(bad.validate().is_err());
        assert!(OptimizerConfig::finetune_default().validate().is_ok());
    }

    fn scalar_model() -> (ModelConfig, ModelParams<f64>) {
        let cfg = ModelConfig::toy(25);
        (cfg.clone(), init_model(&cfg, 0).unwrap())
    }

    #[test]
    fn hand_evaluated_update() {
        let (_, mut params) = scalar_model();
        let mut grads = params.zeros_like();
        params.mlm_head.bias[0] = 1.0;
        grads.mlm_head.bias[0] = 1.0;
        let mut state = AdamState::new(&params);
        let o = OptimizerConfig {
            learning_rate: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            epsilon: 1e-6,
            weight_decay: 0.0,
            warmup_steps: 0,
            total_steps: 1,
        };
        adamw_step(&mut params, &grads, &mut state, &o, 1, 0.1).unwrap();
        let expected = 1.0 - 0.1 / (1.0 + 1e-6);
        assert!((params.mlm_head.bias[0] - expected).abs() < 1e-15);
        assert!((params.mlm_head.bias[0] - 0.9000001).abs() < 1e-9);
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let (_, mut params) = scalar_model();
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        let o = OptimizerConfig {
            weight_decay: 0.0,
            ..sched(0, 10)
        };
        adamw_step(&mut params, &grads, &mut state, &o, 1, 1e-3).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn decoupled_decay_spares_biases_and_norms() {
        let (_, mut params) = scalar_model();
        params.mlm_head.bias.fill(0.5);
        let before = params.clone();
        let grads = params.zeros_like();
        let mut state = AdamState::new(&params);
        let o = OptimizerConfig {
            weight_decay: 0.01,
            ..sched(0, 10)
        };
        adamw_step(&mut params, &grads, &mut state, &o, 1, 1e-4).unwrap();
        for (a, b) in params.tensors().iter().zip(before.tensors()) {
            for (x, y) in a.data.iter().zip(b.data) {
                if a.kind.decays() {
                    assert!((x - y * (1.0 - 1e-6)).abs() <= 1e-18);
                } else {
                    assert_eq!(x, y);
                }
            }
        }
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let (_, mut params) = scalar_model();
        let mut grads = params.zeros_like();
        grads.layers[1].ffn_in.weight[[0, 0]] = f64::NAN;
        let mut state = AdamState::new(&params);
        let before = params.clone();
        let err = adamw_step(&mut params, &grads, &mut state, &sched(0, 1), 1, 1e-3).unwrap_err();
        assert!(
            err.to_string().contains("layers.1.ffn.input.weight"),
            "{err}"
        );
        assert_eq!(params, before);
    }
}

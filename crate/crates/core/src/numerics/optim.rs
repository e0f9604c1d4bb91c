use serde::{Deserialize, Serialize};

use super::{NumericsError, ParamSet};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adam hyperparameters. The learning rate is not stored here; it is
/// supplied on every step by the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
            weight_decay: 0.0,
        }
    }
}

impl AdamConfig {
    pub fn with_weight_decay(weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::default()
        }
    }
}

/// Adam moment accumulators aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one AdamW update with learning rate `lr` to every parameter
    /// that requires grad, then clears the grads.
    pub fn step(&mut self, params: &mut ParamSet, lr: f64) -> Result<(), NumericsError> {
        if params.len() != self.first.len() {
            return Err(NumericsError::DataLength {
                expected: self.first.len(),
                actual: params.len(),
            });
        }
        for (name, t) in params.iter() {
            if t.requires_grad() && t.grad().is_none() {
                return Err(NumericsError::MissingGrad(name.to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (_, t)) in params.iter_mut().enumerate() {
            if !t.requires_grad() {
                continue;
            }
            let grad = t.grad().expect("checked above").to_vec();
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (((w, g), m), v) in t.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bias1;
                let v_hat = *v / bias2;
                *w -= lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * *w);
            }
            t.clear_grad();
        }
        Ok(())
    }

    /// Resets the moments of selected entries of parameter `index`.
    pub fn reset_entries(&mut self, index: usize, entries: impl IntoIterator<Item = usize>) {
        for e in entries {
            self.first[index][e] = 0.0;
            self.second[index][e] = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn scalar_param(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::scalar(value).with_requires_grad(true)).unwrap();
        p
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let mut p = scalar_param(0.5);
        let mut opt = OptimizerState::new(&p, AdamConfig::default());
        p.get_mut("w").unwrap().set_grad(vec![3.0]).unwrap();
        opt.step(&mut p, 0.0).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.5);
        assert!(p.get("w").unwrap().grad().is_none());
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn positive_gradient_decreases_param() {
        let mut p = scalar_param(0.0);
        let mut opt = OptimizerState::new(&p, AdamConfig::default());
        p.get_mut("w").unwrap().set_grad(vec![1.0]).unwrap();
        opt.step(&mut p, 0.1).unwrap();
        assert!(p.get("w").unwrap().item() < 0.0);
    }

    #[test]
    fn missing_grad_is_rejected() {
        let mut p = scalar_param(0.0);
        let mut opt = OptimizerState::new(&p, AdamConfig::default());
        let err = opt.step(&mut p, 0.1).unwrap_err();
        assert!(matches!(err, NumericsError::MissingGrad(n) if n == "w"));
    }

    #[test]
    fn zero_grad_with_reset_moments_keeps_zero_weight_fixed() {
        let mut p = scalar_param(0.0);
        let mut opt = OptimizerState::new(&p, AdamConfig::with_weight_decay(0.01));
        p.get_mut("w").unwrap().set_grad(vec![2.0]).unwrap();
        opt.step(&mut p, 0.1).unwrap();
        p.get_mut("w").unwrap().data_mut()[0] = 0.0;
        opt.reset_entries(0, [0]);
        for _ in 0..5 {
            p.get_mut("w").unwrap().set_grad(vec![0.0]).unwrap();
            opt.step(&mut p, 0.1).unwrap();
        }
        assert_eq!(p.get("w").unwrap().item().to_bits(), 0.0f64.to_bits());
    }
}

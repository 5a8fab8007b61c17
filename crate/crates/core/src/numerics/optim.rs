use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};

/// Hyperparameters for Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.weight_decay >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Step counter and per-parameter moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, t)| vec![0.0; t.numel()]).collect();
        Self {
            step_count: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamConfig, params: &ParamStore) -> Self {
        Self {
            config,
            state: OptimizerState::new(params),
        }
    }

    /// One bias-corrected Adam update with decoupled weight decay.
    ///
    /// Decay is applied first (`p *= 1 - lr·wd`), then the Adam step.
    /// Gradient buffers are read but left in place.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if self.state.first_moment.len() != params.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, store holds {}",
                self.state.first_moment.len(),
                params.len()
            )));
        }
        for id in params.ids() {
            let t = params.get(id);
            if !t.requires_grad() {
                continue;
            }
            match t.grad() {
                None => return Err(Error::MissingGrad(params.name(id).to_string())),
                Some(g) if g.iter().any(|v| !v.is_finite()) => {
                    return Err(Error::NumericDomain(format!(
                        "gradient of `{}` is not finite",
                        params.name(id)
                    )))
                }
                Some(_) => {}
            }
        }
        let AdamConfig {
            learning_rate: lr,
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        self.state.step_count += 1;
        let t = self.state.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for id in params.ids() {
            let i = id.index();
            let tensor = params.get_mut(id);
            if !tensor.requires_grad() {
                continue;
            }
            let grad = tensor.grad().expect("checked above").to_vec();
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            for (k, p) in tensor.values_mut().iter_mut().enumerate() {
                let g = grad[k];
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *p *= decay;
                *p -= lr * m_hat / (v_hat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}

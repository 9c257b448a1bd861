use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::TensorMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Moments {
    first: Vec<f32>,
    second: Vec<f32>,
}

/// AdamW state: per-parameter moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One decoupled-weight-decay Adam update of every `trainable` tensor.
    ///
    /// `w <- w - lr*wd*w - lr * m_hat / (sqrt(v_hat) + eps)`
    pub fn step(
        &mut self,
        params: &mut TensorMap,
        grads: &BTreeMap<String, Vec<f32>>,
        trainable: &[String],
    ) -> Result<(), TensorError> {
        // Validate everything before mutating anything.
        for name in trainable {
            let p = params.get(name)?;
            let g = grads
                .get(name)
                .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
            if g.len() != p.numel() {
                return Err(TensorError::DataLength {
                    shape: p.shape().to_vec(),
                    len: g.len(),
                });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - f64::from(c.beta1).powi(t);
        let bc2 = 1.0 - f64::from(c.beta2).powi(t);
        let decay = c.lr * c.weight_decay;
        for name in trainable {
            let p = params.get_mut(name)?;
            let g = &grads[name];
            let n = p.numel();
            let m = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                first: vec![0.0; n],
                second: vec![0.0; n],
            });
            for (((w, &gi), m1), m2) in p
                .data_mut()
                .iter_mut()
                .zip(g)
                .zip(m.first.iter_mut())
                .zip(m.second.iter_mut())
            {
                *m1 = c.beta1 * *m1 + (1.0 - c.beta1) * gi;
                *m2 = c.beta2 * *m2 + (1.0 - c.beta2) * gi * gi;
                let m_hat = f64::from(*m1) / bc1;
                let v_hat = f64::from(*m2) / bc2;
                let update = f64::from(c.lr) * m_hat / (v_hat.sqrt() + f64::from(c.eps));
                *w = *w - decay * *w - update as f32;
            }
        }
        Ok(())
    }
}

/// Functional form of [`OptimizerState::step`].
pub fn adamw_step(
    params: &mut TensorMap,
    grads: &BTreeMap<String, Vec<f32>>,
    state: &mut OptimizerState,
    trainable: &[String],
) -> Result<(), TensorError> {
    state.step(params, grads, trainable)
}

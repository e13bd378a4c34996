//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::params::ParamStore;
use crate::DiffError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates shaped like the parameters they track.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: ParamStore,
    pub second_moment: ParamStore,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: params.zeros_like(),
            second_moment: params.zeros_like(),
        }
    }

    /// Applies one update to `params` given a gradient in flattening order.
    ///
    /// A gradient containing NaN or infinity is rejected before anything is
    /// modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[f64]) -> Result<(), DiffError> {
        let n = params.num_values();
        if grads.len() != n {
            return Err(DiffError::Dimension {
                expected: n,
                got: grads.len(),
            });
        }
        if self.first_moment.num_values() != n {
            return Err(DiffError::Dimension {
                expected: n,
                got: self.first_moment.num_values(),
            });
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(DiffError::NonFiniteGradient { index: i });
        }
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step += 1;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);

        let mut theta = params.flatten();
        let mut m = self.first_moment.flatten();
        let mut v = self.second_moment.flatten();
        for i in 0..n {
            let g = grads[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        params.assign_flat(&theta)?;
        self.first_moment.assign_flat(&m)?;
        self.second_moment.assign_flat(&v)?;
        Ok(())
    }
}

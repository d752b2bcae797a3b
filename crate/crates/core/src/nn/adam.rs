use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers of the Adam optimizer, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step_count: u64,
    pub(crate) first_moment: Vec<Vec<T>>,
    pub(crate) second_moment: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = |_| {
            params
                .ids()
                .map(|id| vec![T::zero(); params.get(id).len()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step_count: 0,
            first_moment: zeros(()),
            second_moment: zeros(()),
        }
    }

    pub fn first_moment(&self) -> &[Vec<T>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<T>] {
        &self.second_moment
    }

    /// One bias-corrected Adam update from the gradients held in `params`.
    /// Parameters without a gradient buffer are left untouched.
    pub fn step(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if self.first_moment.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                &[self.first_moment.len()],
                &[params.len()],
            ));
        }
        self.step_count += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step_count as i32;
        let c1 = T::of(1.0 - beta1.powi(t));
        let c2 = T::of(1.0 - beta2.powi(t));
        let (b1, b2, eps, lr) = (T::of(beta1), T::of(beta2), T::of(eps), T::of(lr));
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let i = id.index();
            let tensor = params.get_mut(id);
            let Some(grad) = tensor.grad().map(<[T]>::to_vec) else {
                continue;
            };
            let m = &mut self.first_moment[i];
            let v = &mut self.second_moment[i];
            if m.len() != grad.len() {
                return Err(Error::shape("adam_step", &[m.len()], &[grad.len()]));
            }
            for (((p, &g), mi), vi) in tensor
                .data_mut()
                .iter_mut()
                .zip(&grad)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

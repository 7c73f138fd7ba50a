//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::{Array, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// One AdamW update of a single tensor at 1-based `step`.
///
/// `theta <- theta - lr * wd * theta - lr * m_hat / (sqrt(v_hat) + eps)`
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    theta: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    cfg: &AdamWConfig,
    step: u64,
) -> Result<()> {
    if !(lr > 0.0) {
        return Err(Error::Parameter(format!("learning rate {lr} must be > 0")));
    }
    if step == 0 {
        return Err(Error::Parameter("adamw step counter starts at 1".into()));
    }
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= lr * cfg.weight_decay * theta[i];
        theta[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}

/// Optimizer state for a whole [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    pub(crate) first: Vec<Array>,
    pub(crate) second: Vec<Array>,
    pub(crate) step: u64,
}

impl AdamW {
    pub fn new(store: &ParamStore, cfg: AdamWConfig) -> Self {
        let zeros = || store.ids().map(|id| Array::zeros(store.value(id).shape())).collect();
        Self {
            cfg,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self, id: ParamId) -> (&Array, &Array) {
        (&self.first[id.0], &self.second[id.0])
    }

    /// Updates every parameter for which `lr_of` returns a rate; `None`
    /// leaves that parameter and its moments untouched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        lr_of: impl Fn(ParamId, &str) -> Option<f64>,
    ) -> Result<()> {
        if self.first.len() != store.len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.step += 1;
        for id in store.ids().collect::<Vec<_>>() {
            let Some(lr) = lr_of(id, store.name(id)) else {
                continue;
            };
            let (value, grad) = store.value_and_grad(id);
            adamw_step(
                value.data_mut(),
                grad.data(),
                self.first[id.0].data_mut(),
                self.second[id.0].data_mut(),
                lr,
                &self.cfg,
                self.step,
            )?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> AdamWConfig {
        AdamWConfig {
            weight_decay: 0.0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_is_a_null_update() {
        let mut theta = [1.5, -2.0];
        let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
        adamw_step(&mut theta, &[0.0, 0.0], &mut m, &mut v, 0.1, &no_decay(), 1).unwrap();
        assert_eq!(theta, [1.5, -2.0]);
    }

    #[test]
    fn first_step_is_a_bias_corrected_unit_step() {
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
        let mut theta = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_step(&mut theta, &[1.0], &mut m, &mut v, 0.1, &no_decay(), 1).unwrap();
        assert!((theta[0] + 0.1).abs() < 1e-8, "{}", theta[0]);
    }

    #[test]
    fn decay_alone_shrinks_by_lr_times_wd() {
        let cfg = AdamWConfig {
            weight_decay: 0.1,
            ..AdamWConfig::default()
        };
        let mut theta = [2.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        adamw_step(&mut theta, &[0.0], &mut m, &mut v, 0.1, &cfg, 1).unwrap();
        assert!((theta[0] - 2.0 * (1.0 - 0.01)).abs() < 1e-15);
    }

    #[test]
    fn rejects_nonpositive_learning_rate() {
        let mut theta = [0.0];
        let (mut m, mut v) = ([0.0], [0.0]);
        assert!(adamw_step(&mut theta, &[1.0], &mut m, &mut v, 0.0, &no_decay(), 1).is_err());
    }

    #[test]
    fn skipped_parameters_keep_their_moments() {
        let mut store = ParamStore::new();
        let a = store.add("a", Array::scalar(1.0)).unwrap();
        let b = store.add("b", Array::scalar(1.0)).unwrap();
        store.grad_mut(a).data_mut()[0] = 1.0;
        store.grad_mut(b).data_mut()[0] = 1.0;
        let mut opt = AdamW::new(&store, no_decay());
        opt.step(&mut store, |id, _| (id == a).then_some(0.1)).unwrap();
        assert!(store.value(a).data()[0] < 1.0);
        assert_eq!(store.value(b).data()[0], 1.0);
        assert_eq!(opt.moments(b).0.data()[0], 0.0);
    }
}

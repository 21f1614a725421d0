//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use super::params::{Grads, ParamStore};
use super::scalar::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter, allocated on first use.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    moments: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    /// One update of every parameter that has a gradient buffer and is not
    /// frozen.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Grads<T>) -> Result<()> {
        if self.moments.len() < params.len() {
            self.moments.resize(params.len(), None);
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
        let step_size = T::of(c.lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(c.eps);
        let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let p = params.get_mut(id);
            if p.frozen {
                continue;
            }
            if g.len() != p.data.len() {
                return Err(Error::Shape(format!(
                    "gradient for {} has wrong length",
                    p.name
                )));
            }
            let slot = &mut self.moments[id.index()];
            let (m, v) =
                slot.get_or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
            for i in 0..g.len() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                p.data[i] -= step_size * m[i] / ((v[i] * inv_bc2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Free-function form of [`AdamState::step`].
pub fn adam_step<T: Real>(
    state: &mut AdamState<T>,
    params: &mut ParamStore<T>,
    grads: &Grads<T>,
) -> Result<()> {
    state.step(params, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(values: Vec<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let n = values.len();
        s.add("w", &[n], values).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(vec![1.0, -2.0]);
        let g = Grads::zeros_like(&s);
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1));
        adam.step(&mut s, &g).unwrap();
        assert_eq!(s.data(s.id("w").unwrap()), &[1.0, -2.0]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let mut s = store(vec![0.0]);
        let id = s.id("w").unwrap();
        let mut g = Grads::zeros_like(&s);
        g.get_mut(id).unwrap()[0] = 0.37;
        let lr = 0.01;
        let mut adam = AdamState::new(AdamConfig::with_lr(lr));
        adam.step(&mut s, &g).unwrap();
        let gg: f64 = 0.37;
        let expect = -lr * (gg * 0.1 / 0.1) / ((gg * gg * 0.001 / 0.001).sqrt() + 1e-8);
        assert!((s.data(id)[0] - expect).abs() < 1e-15);
        assert!((s.data(id)[0] + lr).abs() < 1e-9);
    }

    #[test]
    fn frozen_parameter_is_skipped() {
        let mut s = store(vec![1.0]);
        let id = s.id("w").unwrap();
        let mut g = Grads::zeros_like(&s);
        g.get_mut(id).unwrap()[0] = 1.0;
        s.get_mut(id).frozen = true;
        AdamState::new(AdamConfig::with_lr(0.1))
            .step(&mut s, &g)
            .unwrap();
        assert_eq!(s.data(id)[0], 1.0);
    }
}

use std::collections::HashMap;

use crate::param::{ParamId, ParamStore};
use crate::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
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

/// First and second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

/// Decoupled-weight-decay Adam. Moment state is keyed by parameter name so it can be
/// saved and restored alongside a checkpoint.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    state: HashMap<String, Moments<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: HashMap::new(),
        }
    }

    pub fn state(&self) -> &HashMap<String, Moments<T>> {
        &self.state
    }

    pub fn set_state(&mut self, state: HashMap<String, Moments<T>>) {
        self.state = state;
    }

    /// Applies one update per `(id, grad)` pair. Frozen parameters and ids belonging to other
    /// stores are skipped.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) {
        let cfg = self.config;
        for (id, g) in grads {
            if !store.owns(*id) || !store.is_trainable(*id) {
                continue;
            }
            let name = store.name(*id).to_string();
            let value = store.value_mut(*id);
            assert_eq!(value.shape(), g.shape(), "gradient shape mismatch for {name}");
            let st = self.state.entry(name).or_insert_with(|| Moments {
                m: Tensor::zeros(g.shape()),
                v: Tensor::zeros(g.shape()),
                step: 0,
            });
            st.step += 1;
            let t = st.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
            let step_size = T::from_f64(cfg.lr / bc1);
            let inv_bc2_sqrt = T::from_f64(1.0 / bc2.sqrt());
            let eps = T::from_f64(cfg.eps);
            let decay = T::from_f64(1.0 - cfg.lr * cfg.weight_decay);
            let (m, v) = (st.m.data_mut(), st.v.data_mut());
            for (((p, &gi), mi), vi) in value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let denom = vi.sqrt() * inv_bc2_sqrt + eps;
                *p = *p * decay - step_size * *mi / denom;
            }
        }
    }
}

use std::collections::BTreeMap;

use super::TrainError;
use crate::diffmath::{GradBuffer, ParamId, ParamStore, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Adamax moments, aligned with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamaxState {
    pub m: Vec<Tensor>,
    pub u: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamaxState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            m: zeros(),
            u: zeros(),
            t: 0,
            beta1: BETA1,
            beta2: BETA2,
            eps: EPSILON,
        }
    }

    /// One update of every parameter in `only` (all parameters when `None`):
    ///
    /// ```text
    /// m ← β1·m + (1 − β1)·g
    /// u ← max(β2·u, |g|)
    /// θ ← θ − lr / (1 − β1^t) · m / (u + ε)
    /// ```
    ///
    /// Nothing is modified when any gradient is NaN or infinite.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &GradBuffer,
        lr: f64,
        only: Option<&[ParamId]>,
    ) -> Result<(), TrainError> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {lr} must be positive")));
        }
        if self.m.len() != store.len() || grads.len() != store.len() {
            return Err(TrainError::Config("optimizer state does not match the parameters".into()));
        }
        let ids: Vec<ParamId> = match only {
            Some(ids) => ids.to_vec(),
            None => store.ids().collect(),
        };
        for &id in &ids {
            if !grads.get(id).is_finite() {
                return Err(TrainError::NonFiniteGradient {
                    param: store.name(id).to_owned(),
                });
            }
        }
        self.t += 1;
        let step = lr / (1.0 - self.beta1.powi(self.t.min(i32::MAX as u64) as i32));
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for id in ids {
            let i = id.index();
            let g = grads.get(id).data();
            let m = self.m[i].data_mut();
            let u = self.u[i].data_mut();
            let theta = store.get_mut(id).data_mut();
            for k in 0..g.len() {
                m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                u[k] = (b2 * u[k]).max(g[k].abs());
                theta[k] -= step * m[k] / (u[k] + eps);
            }
        }
        Ok(())
    }

    /// Moments as named tensors for checkpoint storage.
    pub fn to_extras(&self, store: &ParamStore) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (id, p) in store.iter() {
            out.insert(format!("adamax.m.{}", p.name), self.m[id.index()].clone());
            out.insert(format!("adamax.u.{}", p.name), self.u[id.index()].clone());
        }
        out
    }

    pub fn from_extras(store: &ParamStore, extras: &BTreeMap<String, Tensor>, t: u64) -> Result<Self, TrainError> {
        let mut state = Self::new(store);
        state.t = t;
        for (id, p) in store.iter() {
            for (kind, slot) in [("m", &mut state.m[id.index()]), ("u", &mut state.u[id.index()])] {
                let key = format!("adamax.{kind}.{}", p.name);
                let t = extras
                    .get(&key)
                    .ok_or_else(|| TrainError::Config(format!("checkpoint lacks optimizer tensor {key}")))?;
                if t.shape() != p.value.shape() {
                    return Err(TrainError::Config(format!("optimizer tensor {key} has the wrong shape")));
                }
                *slot = t.clone();
            }
        }
        Ok(state)
    }
}

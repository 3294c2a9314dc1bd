//! Named parameter storage and the Adam optimizer.

use crate::error::{invalid, mismatch, Result};
use crate::scalar::Real;
use crate::tape::{Gradients, ParamId, Tape, Var};
use crate::tensor::Tensor;

/// Owns every learnable tensor of a model, addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    frozen: Vec<bool>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            frozen: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        self.frozen.push(false);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn freeze(&mut self, id: ParamId) {
        self.frozen[id.0] = true;
    }

    pub fn freeze_all(&mut self) {
        self.frozen.iter_mut().for_each(|f| *f = true);
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.frozen[id.0]
    }

    /// Records the parameter on `tape`; frozen parameters are recorded untracked.
    pub fn var(&self, tape: &mut Tape<T>, id: ParamId) -> Var {
        tape.param(id, &self.values[id.0], !self.frozen[id.0])
    }

    pub fn count(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            frozen: self.frozen.clone(),
        }
    }

    /// Replaces values by name. Every name in `other` must exist here with the same shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, value) in other.iter() {
            let id = self
                .find(name)
                .ok_or_else(|| invalid("load params", format!("unknown parameter {name}")))?;
            if self.values[id.0].shape() != value.shape() {
                return Err(mismatch("load params", self.values[id.0].shape(), value.shape()));
            }
            self.values[id.0] = value.clone();
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
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

/// First/second moment buffers for one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<T: Real>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(mismatch(
            "adam_step",
            &[params.len()],
            &[grads.len(), state.m.len(), state.v.len()],
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    let (b1, b2) = (T::of(beta1), T::of(beta2));
    let (ob1, ob2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
    let step = T::of(lr / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(eps);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + ob1 * g;
        state.v[i] = b2 * state.v[i] + ob2 * g * g;
        let denom = (state.v[i] * inv_bc2).sqrt() + eps;
        params[i] -= step * state.m[i] / denom;
    }
    Ok(())
}

/// Adam over every trainable tensor in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    states: Vec<AdamState<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, config: AdamConfig) -> Self {
        Self {
            config,
            states: store.values.iter().map(|v| AdamState::new(v.numel())).collect(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    /// Applies `grads` (already reduced over the batch) to unfrozen parameters.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[(ParamId, Tensor<T>)]) -> Result<()> {
        let c = self.config;
        for (id, g) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            adam_step(
                store.values[id.0].data_mut(),
                g.data(),
                &mut self.states[id.0],
                c.lr,
                c.beta1,
                c.beta2,
                c.eps,
            )?;
        }
        Ok(())
    }
}

/// Collects per-parameter gradients from a backward pass.
pub fn collect_grads<T: Real>(grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
    grads
        .param_ids()
        .into_iter()
        .filter_map(|id| grads.param(id).map(|g| (id, g)))
        .collect()
}

/// Elementwise sum of gradient lists with identical ids, in order.
pub fn accumulate<T: Real>(into: &mut Vec<(ParamId, Tensor<T>)>, more: Vec<(ParamId, Tensor<T>)>) {
    if into.is_empty() {
        *into = more;
        return;
    }
    for (id, g) in more {
        match into.iter_mut().find(|(i, _)| *i == id) {
            Some((_, acc)) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += *b),
            None => into.push((id, g)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_and_decays_moments() {
        let mut p = vec![1.0f64, -2.0];
        let mut st = AdamState::new(2);
        st.m = vec![0.5, 0.5];
        st.v = vec![0.25, 0.25];
        // a zero gradient still moves θ while m is nonzero; start from zero moments
        let mut fresh = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut fresh, 1e-3, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        assert_eq!(fresh.m, vec![0.0, 0.0]);
        let mut q = vec![0.0f64; 2];
        adam_step(&mut q, &[0.0, 0.0], &mut st, 0.0, 0.9, 0.999, 1e-8).unwrap();
        assert_eq!(st.m, vec![0.45, 0.45]);
        assert!((st.v[0] - 0.24975).abs() < 1e-15);
    }

    #[test]
    fn first_step_is_minus_lr_times_sign() {
        let mut p = vec![0.0f64, 0.0];
        let mut st = AdamState::new(2);
        adam_step(&mut p, &[1.0, -3.0], &mut st, 0.001, 0.9, 0.999, 1e-8).unwrap();
        assert!((p[0] + 0.001).abs() < 1e-10);
        assert!((p[1] - 0.001).abs() < 1e-10);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut p = vec![0.0f64; 2];
        let mut st = AdamState::new(3);
        assert!(adam_step(&mut p, &[1.0, 1.0], &mut st, 0.1, 0.9, 0.999, 1e-8).is_err());
    }

    #[test]
    fn three_step_trace_matches_hand_computation() {
        // scalar trace computed by hand, independently of adam_step
        let (lr, b1, b2, eps) = (0.01f64, 0.9f64, 0.999f64, 1e-8f64);
        let gs = [0.5f64, -1.0, 2.0];
        let (mut th, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for (t, g) in gs.iter().enumerate() {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            th -= lr * mh / (vh.sqrt() + eps);
            expected.push(th);
        }
        let mut p = vec![1.0f64];
        let mut st = AdamState::new(1);
        for (g, want) in gs.iter().zip(expected) {
            adam_step(&mut p, &[*g], &mut st, lr, b1, b2, eps).unwrap();
            assert!((p[0] - want).abs() < 1e-12, "{} vs {}", p[0], want);
        }
    }
}

//! Named trainable parameters and the Adam update.

use serde::{Deserialize, Serialize};

use super::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Ordered collection of parameters sharing one optimizer clock.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let shape = value.shape().to_vec();
        self.params.push(Parameter {
            name: name.into(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub(crate) fn add_grad(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.params[id.0].grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub(crate) fn clear_grad(&mut self, id: ParamId) {
        self.params[id.0].grad.data_mut().fill(0.0);
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Resets first/second moments and the step counter.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for p in &mut self.params {
            p.m.data_mut().fill(0.0);
            p.v.data_mut().fill(0.0);
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Flattened copy of every parameter value, in insertion order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.value.data().iter().copied()).collect()
    }

    pub fn total_grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
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

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// One bias-corrected Adam update over every parameter, then clears the
/// gradient buffers.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) {
    store.step += 1;
    let t = store.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for p in &mut store.params {
        let Parameter { value, grad, m, v, .. } = p;
        for (((w, g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data_mut().iter_mut())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * *g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * *g * *g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            *g = 0.0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64]) -> (ParamStore, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(vec![values.len()], values.to_vec()).unwrap());
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = store_with(&[1.0, -2.0]);
        adam_step(&mut s, &AdamConfig::default());
        assert_eq!(s.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let (mut s, id) = store_with(&[0.0, 0.0, 0.0]);
        s.add_grad(id, &[0.5, -3.0, 1e-3]);
        let cfg = AdamConfig::default();
        adam_step(&mut s, &cfg);
        // m_hat = g, v_hat = g^2  =>  delta = -lr * g / (|g| + eps)
        for (w, g) in s.value(id).data().iter().zip([0.5f64, -3.0, 1e-3]) {
            let want = -cfg.lr * g / (g.abs() + cfg.eps);
            assert!((w - want).abs() < 1e-15, "{w} vs {want}");
        }
        assert!(s.grad(id).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn constant_gradient_update_tends_to_lr() {
        let (mut s, id) = store_with(&[0.0]);
        let cfg = AdamConfig::default();
        let mut last = 0.0;
        let mut delta = 0.0;
        for _ in 0..5000 {
            s.add_grad(id, &[0.25]);
            adam_step(&mut s, &cfg);
            let now = s.value(id).data()[0];
            delta = last - now;
            last = now;
        }
        assert!((delta / cfg.lr - 1.0).abs() < 1e-6, "ratio {}", delta / cfg.lr);
    }

    #[test]
    fn zero_lr_is_identity() {
        let (mut s, id) = store_with(&[3.0]);
        s.add_grad(id, &[10.0]);
        adam_step(&mut s, &AdamConfig::with_lr(0.0));
        assert_eq!(s.value(id).data(), &[3.0]);
    }
}

//! AdamW: Adam with weight decay decoupled from the gradient.
//!
//! Per element, at step `t`:
//!
//! ```text
//! p ← p − lr·wd·p
//! m ← β₁m + (1−β₁)g        v ← β₂v + (1−β₂)g²
//! p ← p − lr · (m / (1−β₁ᵗ)) / (sqrt(v / (1−β₂ᵗ)) + ε)
//! ```

use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moments aligned with a [`ParamStore`], plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamWState {
    pub fn new(params: &ParamStore<f32>) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One AdamW update of every parameter. A non-finite gradient aborts before
/// anything is modified.
pub fn adamw_step(
    params: &mut ParamStore<f32>,
    grads: &Gradients<f32>,
    state: &mut AdamWState,
    config: &AdamWConfig,
) -> Result<()> {
    if grads.tensors.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::format("optimizer", "gradient/state count does not match parameters"));
    }
    for (name, g) in params.names().iter().zip(&grads.tensors) {
        if !g.all_finite() {
            return Err(Error::Diverged(format!("non-finite gradient in {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let decay = 1.0 - config.lr * config.weight_decay;
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads.tensors[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (k, pv) in p.data_mut().iter_mut().enumerate() {
            let gk = g[k] as f64;
            let mk = config.beta1 * m[k] as f64 + (1.0 - config.beta1) * gk;
            let vk = config.beta2 * v[k] as f64 + (1.0 - config.beta2) * gk * gk;
            m[k] = mk as f32;
            v[k] = vk as f32;
            let m_hat = mk / bc1;
            let v_hat = vk / bc2;
            let decayed = *pv as f64 * decay;
            *pv = (decayed - config.lr * m_hat / (v_hat.sqrt() + config.eps)) as f32;
        }
    }
    Ok(())
}

/// Optimizer bundle: hyperparameters plus state.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &ParamStore<f32>) -> Self {
        Self {
            config,
            state: AdamWState::new(params),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &Gradients<f32>) -> Result<()> {
        adamw_step(params, grads, &mut self.state, &self.config)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f32) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(p));
        s
    }

    fn grad(g: f32) -> Gradients<f32> {
        Gradients {
            tensors: vec![Tensor::scalar(g)],
        }
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut p = scalar_store(0.7);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &grad(0.0), &mut st, &cfg).unwrap();
        assert_eq!(p.get("p").unwrap().data()[0], 0.7);
    }

    #[test]
    fn first_step_hand_evaluated() {
        // t=1: m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε) ≈ 0.1
        let mut p = scalar_store(1.0);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.0,
            ..Default::default()
        };
        adamw_step(&mut p, &grad(1.0), &mut st, &cfg).unwrap();
        let expected = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8));
        assert!((p.get("p").unwrap().data()[0] as f64 - expected).abs() < 1e-6);
        assert!((p.get("p").unwrap().data()[0] as f64 - 0.9).abs() < 1e-6);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn decay_only() {
        let mut p = scalar_store(2.0);
        let mut st = AdamWState::new(&p);
        let cfg = AdamWConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        adamw_step(&mut p, &grad(0.0), &mut st, &cfg).unwrap();
        assert!((p.get("p").unwrap().data()[0] as f64 - 2.0 * (1.0 - 0.001)).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar_store(1.0);
        let mut st = AdamWState::new(&p);
        let err = adamw_step(&mut p, &grad(f32::NAN), &mut st, &AdamWConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::Diverged(m) if m.contains('p')));
        assert_eq!(st.step, 0);
        assert_eq!(p.get("p").unwrap().data()[0], 1.0);
    }
}

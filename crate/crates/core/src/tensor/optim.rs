//! Named parameter storage and the AdamW optimizer.
//!
//! Update rule, per parameter with gradient `g` at step `t`:
//!
//! ```text
//! m ← β₁·m + (1−β₁)·g
//! v ← β₂·v + (1−β₂)·g²
//! p ← p − lr·m̂/(√v̂ + ε) − lr·wd·p      m̂ = m/(1−β₁ᵗ), v̂ = v/(1−β₂ᵗ)
//! ```
//!
//! Weight decay is decoupled: it acts on the pre-update parameter and never
//! enters the moment estimates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Graph, Result, Tensor, TensorError, Var};

/// Parameters keyed by name. Iteration is always in sorted name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Places every parameter on `graph` as a leaf. Frozen stores produce
    /// constants so no gradient can reach them.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> BTreeMap<String, Var> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), graph.leaf(v.clone(), trainable)))
            .collect()
    }

    /// Reads the accumulated gradients of bound parameters back out of `graph`.
    pub fn collect_grads(graph: &Graph, bound: &BTreeMap<String, Var>) -> BTreeMap<String, Tensor> {
        bound
            .iter()
            .filter_map(|(k, v)| graph.grad(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    shape: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    state: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// First and second moment of parameter `name`, if it has been stepped.
    pub fn moments(&self, name: &str) -> Option<(&[f32], &[f32])> {
        self.state
            .get(name)
            .map(|s| (s.m.as_slice(), s.v.as_slice()))
    }

    /// One update of every parameter that has a gradient in `grads`.
    /// Parameters without a gradient are left untouched.
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(TensorError::NonFiniteGradient(name.clone()));
            }
            let p = params.get(name).ok_or_else(|| TensorError::Invalid {
                op: "adamw",
                msg: format!("gradient for unknown parameter `{name}`"),
            })?;
            if p.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "adamw",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
            if let Some(s) = self.state.get(name) {
                if s.shape != p.shape() {
                    return Err(TensorError::StateShape {
                        name: name.clone(),
                        state: s.shape.clone(),
                        param: p.shape().to_vec(),
                    });
                }
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - (c.beta1 as f64).powi(t);
        let bc2 = 1.0 - (c.beta2 as f64).powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let st = self.state.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
                shape: g.shape().to_vec(),
            });
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m as f64 / bc1;
                let v_hat = *v as f64 / bc2;
                let old = *p as f64;
                let upd = c.lr as f64 * m_hat / (v_hat.sqrt() + c.eps as f64);
                *p = (old - upd - c.lr as f64 * c.weight_decay as f64 * old) as f32;
            }
        }
        Ok(())
    }
}

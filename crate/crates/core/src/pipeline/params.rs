//! Named trainable parameters, their tape binding, and the AdamW optimizer.

use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Result, StepError};
use crate::numerics::{Tape, Tensor, Var};

/// Ordered collection of named parameter tensors. Values are kept at f32
/// precision; arithmetic happens in f64.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, mut value: Tensor) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(StepError::invalid(format!("duplicate parameter `{name}`")));
        }
        value.round_to_f32();
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(value);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn set(&mut self, name: &str, mut value: Tensor) -> Result<()> {
        let i = self
            .position(name)
            .ok_or_else(|| StepError::invalid(format!("unknown parameter `{name}`")))?;
        if value.shape() != self.tensors[i].shape() {
            return Err(StepError::invalid(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                self.tensors[i].shape(),
                value.shape()
            )));
        }
        value.round_to_f32();
        self.tensors[i] = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// SHA-256 over the f32 images of the parameters whose names start with
    /// any of `prefixes` (all parameters for an empty slice).
    pub fn hash_group(&self, prefixes: &[&str]) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            if prefixes.is_empty() || prefixes.iter().any(|p| name.starts_with(p)) {
                h.update(name.as_bytes());
                h.update(t.to_le_f32_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Places every parameter on the tape. Names in `frozen` become
    /// constants; the rest are gradient leaves.
    pub fn bind(&self, tape: &mut Tape, frozen: &[&str]) -> Bound {
        let vars = self
            .iter()
            .map(|(name, t)| {
                if frozen.contains(&name) {
                    tape.constant(t.clone())
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Tape handles for a [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    pub vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("parameter `{name}` was never registered"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Moment estimates for every parameter plus the global step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Collects gradients for every bound parameter; frozen or unreached ones
/// get `None`.
pub fn collect_grads(tape: &Tape, bound: &Bound) -> Vec<Option<Tensor>> {
    bound.vars.iter().map(|&v| tape.grad(v).cloned()).collect()
}

/// Scales gradients so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// One decoupled-weight-decay Adam step. Parameters with `None` gradients
/// are left untouched, moments included.
pub fn adamw_step(
    params: &mut ParamStore,
    state: &mut AdamState,
    grads: &[Option<Tensor>],
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(StepError::invalid("gradient count does not match parameter count"));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(StepError::Numerical(format!(
                    "non-finite gradient for parameter `{}`",
                    params.names[i]
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let Some(g) = g else { continue };
        let p = params.tensors[i].data_mut();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for j in 0..p.len() {
            let gj = g.data()[j];
            m[j] = (cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj) as f32 as f64;
            v[j] = (cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj) as f32 as f64;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            let decayed = p[j] * (1.0 - cfg.lr * cfg.weight_decay);
            p[j] = (decayed - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps)) as f32 as f64;
        }
    }
    Ok(())
}

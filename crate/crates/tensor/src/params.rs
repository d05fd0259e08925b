//! Named parameter storage, normalized initialization and Adam.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;

use crate::error::{shape_err, Result, TensorError};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
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

/// First/second moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    fn for_shape(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            t: 0,
        }
    }
}

/// Gradients keyed by parameter name, in name order.
pub type GradMap = BTreeMap<String, Tensor>;

/// `into += other`, key by key. Keys missing from `into` are inserted.
pub fn accumulate(into: &mut GradMap, other: GradMap) -> Result<()> {
    for (name, g) in other {
        match into.get_mut(&name) {
            Some(existing) => existing.add_assign(&g)?,
            None => {
                into.insert(name, g);
            }
        }
    }
    Ok(())
}

/// Insertion-ordered map from parameter path to tensor, with Adam state.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    adam: Vec<AdamState>,
    index: HashMap<String, usize>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        self.index.insert(name.clone(), self.names.len());
        self.adam.push(AdamState::for_shape(value.shape()));
        self.names.push(name);
        self.values.push(value);
        Ok(())
    }

    /// Replaces an existing tensor of the same shape, resetting its Adam state.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))?;
        if self.values[i].shape() != value.shape() {
            return shape_err("ParameterStore::set", self.values[i].shape(), value.shape());
        }
        self.adam[i] = AdamState::for_shape(value.shape());
        self.values[i] = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.values[i])
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn adam_state(&self, name: &str) -> Option<&AdamState> {
        self.index.get(name).map(|&i| &self.adam[i])
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// A new store holding only the parameters accepted by `keep`, with
    /// fresh Adam state.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        let mut out = Self::new();
        for (name, value) in self.iter() {
            if keep(name) {
                out.insert(name, value.clone()).expect("names are unique");
            }
        }
        out
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &Tape) -> Binding {
        let vars = self
            .iter()
            .map(|(name, value)| (name.to_string(), tape.leaf(value.clone())))
            .collect();
        Binding { vars }
    }

    /// One bias-corrected Adam update of every parameter.
    pub fn adam_step(&mut self, grads: &GradMap, cfg: &AdamConfig) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let g = grads
                .get(name)
                .ok_or_else(|| TensorError::MissingGradient(name.clone()))?;
            if g.shape() != self.values[i].shape() {
                return shape_err("adam_step", self.values[i].shape(), g.shape());
            }
        }
        for (i, name) in self.names.iter().enumerate() {
            let g = &grads[name];
            let state = &mut self.adam[i];
            state.t += 1;
            let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
            let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
            let w = self.values[i].data_mut();
            let m = state.m.data_mut();
            let v = state.v.data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j];
                m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
                v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                w[j] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Tape variables for each parameter of a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<(String, Var)>,
}

impl Binding {
    /// Binds names to existing tape variables, e.g. the leaves created by a
    /// gradient check.
    pub fn from_vars(vars: Vec<(String, Var)>) -> Self {
        Self { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| TensorError::UnknownParameter(name.to_string()))
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.iter().any(|(n, _)| n == name)
    }

    /// Gradient for every bound parameter; zero where the loss did not
    /// depend on it.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> GradMap {
        self.vars
            .iter()
            .map(|(name, var)| {
                let g = grads
                    .get(*var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(&tape.shape(*var)));
                (name.clone(), g)
            })
            .collect()
    }
}

/// Fan-in and fan-out of a weight tensor: `[in, out]` matrices or
/// `[kh, kw, cin, cout]` kernels.
pub fn fans(shape: &[usize]) -> (usize, usize) {
    match *shape {
        [n] => (n, n),
        [i, o] => (i, o),
        [kh, kw, ci, co] => (kh * kw * ci, kh * kw * co),
        _ => {
            let n: usize = shape.iter().product();
            (n, n)
        }
    }
}

/// Half-width of the normalized-initialization interval, `√(6/(fan_in+fan_out))`.
pub fn glorot_bound(shape: &[usize]) -> f64 {
    let (fi, fo) = fans(shape);
    (6.0 / (fi + fo) as f64).sqrt()
}

/// Uniform samples in `±glorot_bound(shape)`.
pub fn glorot_uniform<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let bound = glorot_bound(shape);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| (2.0 * rng.gen::<f64>() - 1.0) * bound)
        .collect();
    Tensor::new(shape, data).expect("length matches shape")
}

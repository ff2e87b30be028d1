//! Dense f64 tensors, named parameters, and reverse-mode differentiation.
//!
//! [`Tensor`] is a flat row-major buffer plus shape. Gradients live on the
//! tensor itself (`grad`), populated by [`Graph::backward`] and consumed by
//! the optimizer. [`ParamSet`] is an ordered name → [`Parameter`] map; the
//! name ordering is what makes training runs deterministic.

mod eigen;
mod graph;

pub use eigen::sym_eigen;
pub use graph::{Graph, Reduction, Var};

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;
use std::collections::BTreeMap;

/// Dense multi-dimensional value with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {:?} (numel {})",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Gaussian init with the given stddev.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: rng::randn_vec(rng, numel, std),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Tensor::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a matrix (or 1 for vectors/scalars).
    pub fn rows(&self) -> usize {
        if self.shape.len() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.numel(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Accumulates `g` into the gradient buffer, allocating on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(buf) => {
                for (a, b) in buf.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => self.grad = Some(g.to_vec()),
        }
    }

    /// Bit-level fingerprint of the value buffer (grad excluded).
    pub fn fingerprint(&self) -> u64 {
        let mut bytes = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_bits().to_le_bytes());
        }
        rng::hash_bytes(&bytes)
    }
}

/// A named model weight. `frozen` wins over `trainable`: a frozen
/// parameter is never touched by the optimizer and its buffer stays
/// bit-identical across a run.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub tensor: Tensor,
    pub trainable: bool,
    pub frozen: bool,
    pub name: String,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        Parameter {
            tensor,
            trainable: true,
            frozen: false,
            name: name.into(),
        }
    }

    pub fn is_updatable(&self) -> bool {
        self.trainable && !self.frozen
    }
}

/// Ordered collection of parameters, keyed by hierarchical name
/// (e.g. `dec.block0.cross_attn.query`).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    map: BTreeMap<String, Parameter>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, param: Parameter) {
        self.map.insert(param.name.clone(), param);
    }

    /// Registers a fresh trainable parameter under `name`.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) {
        let name = name.into();
        self.insert(Parameter::new(name, tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Parameter> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Parameter> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.map.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.map.values_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(|s| s.as_str())
    }

    /// Total scalar count across updatable parameters.
    pub fn trainable_values(&self) -> usize {
        self.iter()
            .filter(|p| p.is_updatable())
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn freeze_prefix(&mut self, prefix: &str) {
        for p in self.map.values_mut() {
            if p.name.starts_with(prefix) {
                p.frozen = true;
            }
        }
    }

    pub fn freeze_all(&mut self) {
        for p in self.map.values_mut() {
            p.frozen = true;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.map.values_mut() {
            p.tensor.zero_grad();
        }
    }

    /// Bit-level fingerprint over every parameter whose name starts with
    /// `prefix` (empty prefix covers the whole set). Used by the freeze
    /// contracts.
    pub fn fingerprint_prefix(&self, prefix: &str) -> u64 {
        let mut bytes = Vec::new();
        for p in self.iter() {
            if p.name.starts_with(prefix) {
                bytes.extend_from_slice(p.name.as_bytes());
                for v in p.tensor.data() {
                    bytes.extend_from_slice(&v.to_bits().to_le_bytes());
                }
            }
        }
        rng::hash_bytes(&bytes)
    }
}

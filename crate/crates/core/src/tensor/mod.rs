//! Dense 64-bit tensors, a recording tape for reverse-mode differentiation,
//! the layer primitives built on it, Adam, and a finite-difference checker.

mod adam;
mod gemm;
pub mod gradcheck;
mod graph;
pub mod nn;

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};

use crate::error::{Error, Result};

/// Row-major real array of rank 1 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.len() > 4 {
        return Err(Error::shape(format!("rank must be 1..=4, got {shape:?}")));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(Error::shape(format!("extents must be positive, got {shape:?}")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Data tensor; rejects NaN/Inf and length mismatches.
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != values.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite value {} at index {i}", values[i])));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            values,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("invalid shape");
        Tensor {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let mut t = Tensor::zeros(shape);
        t.values.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::filled(&[1], value)
    }

    pub fn from_vec(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Tensor::new(&[n], values)
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Self {
        let mut t = Tensor::zeros(shape);
        for v in &mut t.values {
            *v = rng.gen_range(-bound..=bound);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Installs a gradient buffer; its length must match the values.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::shape(format!(
                "gradient length {} does not match tensor length {}",
                grad.len(),
                self.values.len()
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|v| *v = 0.0),
            None => self.grad = Some(vec![0.0; self.values.len()]),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n = check_shape(shape)?;
        if n != self.values.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Flat index of a row-major multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.values[self.offset(index)]
    }
}

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterSet {
    params: BTreeMap<String, Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::contract(format!("duplicate parameter name {name}")));
        }
        self.params.insert(name, tensor.with_requires_grad(true));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// Overwrites every gradient with the values recorded for it in `grads`;
    /// parameters the loss never touched get zeros.
    pub fn load_grads(&mut self, graph: &Graph, grads: &Gradients) {
        for (name, tensor) in self.params.iter_mut() {
            let g = graph
                .param_var(name)
                .and_then(|v| grads.get(v))
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tensor.numel()]);
            tensor.grad = Some(g);
        }
    }

    /// Adds `grads` into the existing buffers (for batches larger than one).
    pub fn accumulate_grads(&mut self, graph: &Graph, grads: &Gradients) {
        for (name, tensor) in self.params.iter_mut() {
            let buf = tensor.grad.get_or_insert_with(|| vec![0.0; tensor.values.len()]);
            if let Some(g) = graph.param_var(name).and_then(|v| grads.get(v)) {
                buf.iter_mut().zip(g).for_each(|(b, x)| *b += x);
            }
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in self.params.values_mut() {
            if let Some(g) = &mut t.grad {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Order-sensitive FNV-1a hash over names and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (name, t) in &self.params {
            feed(name.as_bytes());
            for v in &t.values {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Buffers {
    entries: BTreeMap<String, Vec<f64>>,
}

impl Buffers {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.entries.get(name).map(Vec::as_slice)
    }

    pub fn set(&mut self, name: impl Into<String>, values: Vec<f64>) {
        self.entries.insert(name.into(), values);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length_and_finiteness() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 4]).is_ok());
        assert!(matches!(Tensor::new(&[2, 2], vec![1.0; 3]), Err(Error::Shape(_))));
        assert!(Tensor::new(&[2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(&[1], vec![f64::INFINITY]).is_err());
        assert!(Tensor::new(&[1, 1, 1, 1, 1], vec![1.0]).is_err());
        assert!(Tensor::new(&[0], vec![]).is_err());
    }

    #[test]
    fn grad_must_match_shape() {
        let mut t = Tensor::zeros(&[3]);
        assert!(t.set_grad(vec![0.0; 2]).is_err());
        t.set_grad(vec![1.0; 3]).unwrap();
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0; 3]);
    }

    #[test]
    fn parameter_names_unique_and_sorted() {
        let mut p = ParameterSet::new();
        p.insert("b", Tensor::zeros(&[1])).unwrap();
        p.insert("a", Tensor::zeros(&[1])).unwrap();
        assert!(p.insert("a", Tensor::zeros(&[1])).is_err());
        assert_eq!(p.names().collect::<Vec<_>>(), vec!["a", "b"]);
        assert!(p.get("a").unwrap().requires_grad());
    }

    #[test]
    fn offset_is_row_major() {
        let t = Tensor::new(&[2, 3], (0..6).map(f64::from).collect()).unwrap();
        assert_eq!(t.at(&[1, 2]), 5.0);
        assert_eq!(t.at(&[0, 1]), 1.0);
    }
}

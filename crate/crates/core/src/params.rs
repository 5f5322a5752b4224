//! Ordered collections of named parameter tensors.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::util::to_f32_precision;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// An ordered set of named tensors. Used for network weights, gradients,
/// and optimizer state alike.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    tensors: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: NamedTensor) {
        self.tensors.push(tensor);
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NamedTensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub(crate) fn data(&self, index: usize) -> &[f64] {
        &self.tensors[index].data
    }

    pub(crate) fn data_mut(&mut self, index: usize) -> &mut [f64] {
        &mut self.tensors[index].data
    }

    /// A zero-valued set with the same names and shapes.
    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(NamedTensor::len).sum()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape)
    }

    pub fn check_layout(&self, other: &ParamSet) -> Result<()> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets have different layouts".into()))
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, scale: f64) {
        debug_assert!(self.same_layout(other));
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Flat iteration over every scalar, in declaration order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.tensors.iter().flat_map(|t| t.data.iter().copied())
    }

    pub fn value_at(&self, flat: usize) -> f64 {
        let (t, i) = self.locate(flat);
        self.tensors[t].data[i]
    }

    pub fn set_value_at(&mut self, flat: usize, v: f64) {
        let (t, i) = self.locate(flat);
        self.tensors[t].data[i] = v;
    }

    fn locate(&self, mut flat: usize) -> (usize, usize) {
        for (ti, t) in self.tensors.iter().enumerate() {
            if flat < t.len() {
                return (ti, flat);
            }
            flat -= t.len();
        }
        panic!("flat parameter index out of range");
    }

    pub(crate) fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = to_f32_precision(*v);
            }
        }
    }
}

/// Uniform initialisation in `[-s, s]` with `s = fan_in^{-1/2}`, rounded to
/// `f32` storage precision.
pub(crate) fn init_uniform(rng: &mut ChaCha8Rng, data: &mut [f64], fan_in: usize) {
    let s = 1.0 / (fan_in as f64).sqrt();
    for v in data {
        *v = to_f32_precision(rng.random_range(-s..=s));
    }
}

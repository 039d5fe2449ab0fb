use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use rand::Rng as _;

use super::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::num::Scalar;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors together with their accumulated gradients.
///
/// Every store carries a process-unique key so that a graph can hold leaves
/// from several stores at once.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    key: u64,
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Vec<T>>,
}

static NEXT_KEY: AtomicU64 = AtomicU64::new(0);

fn fresh_key() -> u64 {
    NEXT_KEY.fetch_add(1, Ordering::Relaxed)
}

impl<T: PartialEq> PartialEq for ParamStore<T> {
    fn eq(&self, other: &Self) -> bool {
        self.names == other.names && self.values == other.values && self.grads == other.grads
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        ParamStore {
            key: fresh_key(),
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub(crate) fn key(&self) -> u64 {
        self.key
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let id = ParamId(self.values.len());
        self.grads.push(vec![T::ZERO; value.len()]);
        self.values.push(value);
        self.names.push(name.into());
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::ShapeMismatch {
                op: "param set",
                left: self.values[id.0].shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    pub fn grads_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.grads[id.0]
    }

    pub(crate) fn values_and_grads(&mut self) -> impl Iterator<Item = (&mut [T], &mut [T])> {
        self.values
            .iter_mut()
            .zip(self.grads.iter_mut())
            .map(|(v, g)| (v.data_mut(), g.as_mut_slice()))
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = T::ZERO);
        }
    }

    /// Adds the parameter gradients recorded in `graph` after its backward pass.
    pub fn accumulate_grads(&mut self, graph: &Graph<T>) {
        for (id, grad) in graph.param_grads(self) {
            for (a, b) in self.grads[id.0].iter_mut().zip(grad) {
                *a += *b;
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            key: fresh_key(),
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: self.grads.iter().map(|g| vec![U::ZERO; g.len()]).collect(),
        }
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor<T> {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::from_f64(rng.gen_range(-bound..=bound)))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    /// Glorot/Xavier uniform initialization for a `fan_in x fan_out` matrix.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor<T> {
        let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        Self::uniform(&[fan_in, fan_out], bound, rng)
    }
}

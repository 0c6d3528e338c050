//! Dense tensors, a reverse-mode gradient tape, losses and the AdamW optimizer.

mod conv;
pub mod io;
mod loss;
mod ops;
pub mod optim;
mod tape;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use tape::{GatherIndex, Tape, Var};

/// Row-major dense array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape("Tensor::new", n, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", n, self.data.len()));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Little-endian payload bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * std::mem::size_of::<T>());
        for v in &self.data {
            v.to_le_bytes_vec(&mut out);
        }
        out
    }

    /// SHA-256 over shape and payload, hex encoded.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for d in &self.shape {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(self.to_bytes());
        hex::encode(h.finalize())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Converts to another scalar width.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }
}

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    frozen: bool,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            frozen: false,
        }
    }

    /// Registers a tensor and returns its index.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.values[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Mutable access; refused once frozen.
    pub fn get_mut(&mut self, i: usize) -> Option<&mut Tensor<T>> {
        if self.frozen {
            None
        } else {
            Some(&mut self.values[i])
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Replaces a value during checkpoint loading.
    pub(crate) fn set(&mut self, i: usize, value: Tensor<T>) -> Result<()> {
        if self.values[i].shape() != value.shape() {
            return Err(Error::shape("ParamSet::set", self.values[i].shape(), value.shape()));
        }
        self.values[i] = value;
        Ok(())
    }

    /// Combined checksum of every parameter, in order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (n, v) in self.iter() {
            h.update(n.as_bytes());
            h.update(v.checksum().as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

//! Dense row-major tensors.
//!
//! Activations are laid out `N x H x W x C` and convolution kernels
//! `kH x kW x Cin x Cout`, so the channel axis is always innermost.

use crate::element::Element;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    grad: Option<Vec<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn from_vec(shape: &[usize], data: Vec<E>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid_shape("tensor", shape, "dimensions must be positive"));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::invalid_shape(
                "tensor",
                shape,
                format!("expected {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn full(shape: &[usize], value: E) -> Result<Self> {
        let n = shape.iter().product();
        Self::from_vec(shape, vec![value; n])
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, E::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, E::one())
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Option<Vec<E>>) {
        debug_assert!(grad.as_ref().is_none_or(|g| g.len() == self.data.len()));
        self.grad = grad;
    }

    /// Same data under a different shape with equal element count.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| F::from_f64(v.as_f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets the tensor as `N x H x W x C`.
    pub fn nhwc(&self, op: &'static str) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, h, w, c] => Ok([n, h, w, c]),
            _ => Err(Error::invalid_shape(op, &self.shape, "expected rank-4 N x H x W x C")),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<E>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidValue("cannot stack zero tensors".into()))?;
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(items.len());
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape() != first.shape() {
                return Err(Error::shape("stack", first.shape(), t.shape()));
            }
            data.extend_from_slice(t.data());
        }
        Self::from_vec(&shape, data)
    }

    /// Item `index` along the leading axis.
    pub fn index_outer(&self, index: usize) -> Result<Self> {
        let outer = self.shape[0];
        if index >= outer || self.rank() < 2 {
            return Err(Error::invalid_shape(
                "index_outer",
                &self.shape,
                format!("index {index} out of range"),
            ));
        }
        let inner = self.len() / outer;
        Self::from_vec(&self.shape[1..], self.data[index * inner..(index + 1) * inner].to_vec())
    }
}

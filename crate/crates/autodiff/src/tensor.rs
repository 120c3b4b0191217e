use rand::Rng;

use crate::error::{AdError, Result};
use crate::scalar::Scalar;

/// Dense row-major array with an optional adjoint of the same shape.
#[derive(Debug, Clone)]
pub struct Tensor<T: Scalar> {
    shape: Vec<usize>,
    values: Vec<T>,
    requires_grad: bool,
    adjoint: Option<Vec<T>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, values: Vec<T>) -> Result<Self> {
        if numel(&shape) != values.len() {
            let reason = format!("wants {} values, got {}", numel(&shape), values.len());
            return Err(AdError::ShapeError {
                op: "from_vec",
                shape,
                reason,
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            adjoint: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![T::zero(); n],
            requires_grad: false,
            adjoint: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: T) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![value; n],
            requires_grad: false,
            adjoint: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![value],
            requires_grad: false,
            adjoint: None,
        }
    }

    /// Standard-normal draws scaled by `std`.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: T, rng: &mut R) -> Self {
        let n = numel(&shape);
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let z: f64 = rng.sample(rand_distr::StandardNormal);
            values.push(T::from_f64(z) * std);
        }
        Tensor {
            shape,
            values,
            requires_grad: false,
            adjoint: None,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn adjoint(&self) -> Option<&[T]> {
        self.adjoint.as_deref()
    }

    /// Install an adjoint, accumulating if one is already present.
    pub fn accumulate_adjoint(&mut self, grad: &[T]) {
        debug_assert_eq!(grad.len(), self.values.len());
        match &mut self.adjoint {
            Some(a) => {
                for (ai, gi) in a.iter_mut().zip(grad) {
                    *ai = *ai + *gi;
                }
            }
            None => self.adjoint = Some(grad.to_vec()),
        }
    }

    pub fn clear_adjoint(&mut self) {
        self.adjoint = None;
    }

    /// Contiguous sub-array copy. `offsets[i] + lens[i] <= shape[i]`.
    pub fn slice_copy(&self, offsets: &[usize], lens: &[usize]) -> Result<Tensor<T>> {
        crate::ops::check_window(&self.shape, offsets, lens)?;
        let mut out = vec![T::zero(); numel(lens)];
        crate::ops::copy_window(&self.values, &self.shape, offsets, lens, &mut out);
        Tensor::from_vec(lens.to_vec(), out)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

//! Dense N-dimensional tensors in batch×channel×height×width layout.
//!
//! Storage is a flat row-major `Vec`; the element type is generic so the
//! same kernels run in f32 for training and f64 for gradient checks.

use crate::error::{Error, Result};
use num_traits::Float;
use std::fmt::{Debug, Display};

/// Element type of tensors: f32 for training, f64 for gradient checks.
pub trait Scalar: Float + Debug + Display + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense tensor with positive extents; `data.len()` always equals the
/// product of the extents.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("Tensor::from_vec", format!("all extents must be >= 1, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "Tensor::from_vec",
                format!("shape {shape:?} implies {numel} elements, data has {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        assert!(!shape.is_empty() && shape.iter().all(|&e| e >= 1), "invalid shape {shape:?}");
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn filled(shape: &[usize], v: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = v);
        t
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    /// Single scalar value; panics if the tensor is not one element.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterpret with a new shape of the same element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        self.map(|v| v.to_f64())
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        self.map(|v| v.to_f64() as f32)
    }
}

/// Numerically stable row softmax over the last axis of an N×K tensor.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    assert_eq!(logits.shape().len(), 2, "softmax_rows expects a 2-d tensor");
    let k = logits.shape()[1];
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

/// Shorthand for converting literal constants into the scalar type.
pub(crate) fn s<T: Scalar>(v: f64) -> T {
    T::from_f64(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_shape() {
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::<f32>::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![2, 0], vec![]).is_err());
        assert!(Tensor::<f32>::from_vec(vec![], vec![]).is_err());
    }

    #[test]
    fn softmax_rows_sums_to_one() {
        let t = Tensor::from_vec(vec![2, 3], vec![1.0f64, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        let p = softmax_rows(&t);
        for row in p.data().chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_is_stable_for_large_logits() {
        let t = Tensor::from_vec(vec![1, 2], vec![1000.0f32, -1000.0]).unwrap();
        let p = softmax_rows(&t);
        assert!(p.all_finite());
        assert!((p.data()[0] - 1.0).abs() < 1e-6);
    }
}

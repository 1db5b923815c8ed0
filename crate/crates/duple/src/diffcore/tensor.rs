//! Dense row-major `f64` tensors.

use serde::{Deserialize, Serialize};

/// A dense tensor with row-major layout.  Scalars are represented as
/// shape `[1]`; there is no rank-0 special case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching data buffer.
    ///
    /// Panics if the element count does not match the shape product;
    /// this is a programming error, not a runtime condition.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(
            n,
            data.len(),
            "tensor shape {shape:?} wants {n} elements, got {}",
            data.len()
        );
        assert!(!shape.is_empty(), "tensor rank must be >= 1");
        Tensor { shape, data }
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    /// Shape-`[1]` scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1], vec![v])
    }

    /// Rank-1 tensor from a slice.
    pub fn vector(v: &[f64]) -> Self {
        Tensor::new(vec![v.len()], v.to_vec())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The sole element of a shape-`[1]` tensor.
    ///
    /// Panics when the tensor is not scalar-shaped; callers are
    /// expected to have checked the shape already.
    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar shape {:?}", self.shape);
        self.data[0]
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same number
    /// of elements.
    pub fn reshaped(&self, shape: Vec<usize>) -> Self {
        Tensor::new(shape, self.data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_and_access() {
        let t = Tensor::new(vec![2, 3], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(t.shape(), &[2, 3]);
        assert_eq!(t.len(), 6);
        assert_eq!(t.data()[4], 4.0);
        assert_eq!(Tensor::scalar(7.5).item(), 7.5);
    }

    #[test]
    #[should_panic(expected = "wants 6 elements")]
    fn mismatched_shape_panics() {
        let _ = Tensor::new(vec![2, 3], vec![1.0; 5]);
    }

    #[test]
    fn finiteness_check() {
        assert!(Tensor::vector(&[1.0, -2.0]).all_finite());
        assert!(!Tensor::vector(&[1.0, f64::NAN]).all_finite());
        assert!(!Tensor::vector(&[f64::INFINITY]).all_finite());
    }
}

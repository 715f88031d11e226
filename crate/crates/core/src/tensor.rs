//! Dense f64 tensors.
//!
//! A [`Tensor`] is a plain row-major value buffer with a shape. It is the
//! storage type for model weights and cached document representations:
//! immutable data, shareable across threads, no graph machinery attached.
//! Differentiation happens in [`crate::graph`], which copies tensor data
//! into graph leaves and hands gradients back out.

use crate::error::{Error, Result};
use crate::rng::Rng;

/// Dense multi-dimensional array of f64 values in row-major order.
///
/// `data` is private and has no mutable accessor: once built, a tensor's
/// values never change. Optimizers produce new tensors. The `grad` buffer
/// is populated by training code after a backward pass over the graph the
/// tensor was bound into.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Build a tensor, checking that the shape matches the data length.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} implies {} elements but data has {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// 2-D constructor.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Row vector (1 x n).
    pub fn row_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![1, n], data).expect("row vector shape")
    }

    /// Column vector (n x 1).
    pub fn col_vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n, 1], data).expect("column vector shape")
    }

    /// 1x1 scalar.
    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![1, 1], vec![v]).expect("scalar shape")
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor::matrix(rows, cols, vec![0.0; rows * cols]).expect("zeros shape")
    }

    /// Uniform init in (-scale, scale), consuming `rows*cols` draws in
    /// row-major order.
    pub fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.uniform(-scale, scale))
            .collect();
        Tensor::matrix(rows, cols, data).expect("uniform shape")
    }

    /// Builder-style flag setter.
    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Interpret as a matrix, failing on non-2-D shapes.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[r, c] => Ok((r, c)),
            other => Err(Error::Contract(format!(
                "expected a 2-D tensor, got shape {other:?}"
            ))),
        }
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    /// Element access for 2-D tensors.
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    /// One row of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_enforced() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn row_major_layout() {
        let t = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(t.at(0, 2), 3.0);
        assert_eq!(t.at(1, 0), 4.0);
        assert_eq!(t.row(1), &[4.0, 5.0, 6.0]);
    }

    #[test]
    fn uniform_respects_scale_and_seed() {
        let mut r1 = Rng::new(5);
        let mut r2 = Rng::new(5);
        let a = Tensor::uniform(4, 4, 0.25, &mut r1);
        let b = Tensor::uniform(4, 4, 0.25, &mut r2);
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|x| x.abs() < 0.25));
    }

    #[test]
    fn dims2_rejects_other_ranks() {
        let t = Tensor::new(vec![6], vec![0.0; 6]).unwrap();
        assert!(t.dims2().is_err());
    }
}

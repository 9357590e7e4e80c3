//! Dense row-major `f64` tensor of rank 1 or 2.

use super::DiffError;

/// Value plus gradient slot. Tensors are immutable once built; only the
/// gradient accumulator is filled in later by backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating rank (1 or 2), element count and
    /// finiteness.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self, DiffError> {
        if shape.is_empty() || shape.len() > 2 {
            return Err(DiffError::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                msg: "rank must be 1 or 2".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(DiffError::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                msg: "zero-sized tensors are not allowed".into(),
            });
        }
        if data.len() != numel {
            return Err(DiffError::InvalidShape {
                op: "tensor",
                shape: shape.to_vec(),
                msg: format!("shape wants {numel} elements, data has {}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DiffError::NonFinite { op: "tensor" });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// Single-element tensor of shape `[1]`.
    pub fn scalar(v: f64) -> Result<Self, DiffError> {
        Self::new(vec![v], &[1])
    }

    /// All-zero tensor.
    pub fn zeros(shape: &[usize]) -> Result<Self, DiffError> {
        Self::new(vec![0.0; shape.iter().product()], shape)
    }

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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Accumulated gradient, present on leaves after backward.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(super) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a matrix; a vector counts as a single row.
    pub fn rows(&self) -> usize {
        if self.rank() == 2 {
            self.shape[0]
        } else {
            1
        }
    }

    /// Columns of a matrix; a vector's column count is its length.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Element accessor in (row, col) terms, valid for both ranks.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols() + col]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new(vec![1.0], &[]).is_err());
        assert!(Tensor::new(vec![1.0], &[1, 1, 1]).is_err());
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::new(vec![], &[0]).is_err());
    }

    #[test]
    fn rejects_non_finite_data() {
        assert!(Tensor::new(vec![1.0, f64::NAN], &[2]).is_err());
        assert!(Tensor::new(vec![f64::INFINITY], &[1]).is_err());
    }

    #[test]
    fn row_col_accessors() {
        let t = Tensor::new(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.cols(), 3);
        assert_eq!(t.at(1, 2), 6.0);
        let v = Tensor::new(vec![7.0, 8.0], &[2]).unwrap();
        assert_eq!(v.rows(), 1);
        assert_eq!(v.cols(), 2);
        assert_eq!(v.at(0, 1), 8.0);
    }
}

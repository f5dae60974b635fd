//! Dense N-dimensional `f64` tensor with an optional gradient buffer.
//!
//! This is the substrate for all network math in the crate: feature maps,
//! voxel volumes, layer parameters and their gradients are all [`Tensor`]s.
//! Layout is row-major with channels-first indexing (`[C, D, H, W]` for
//! volumetric data); every kernel and every oracle in the test suite uses
//! the same convention.

pub mod io;
pub mod layers;
pub mod ops;

use std::fmt;

/// Errors raised by tensor construction and the layer kernels.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorError {
    /// Data length does not match the product of the extents.
    DataLength { expected: usize, got: usize },
    /// Two tensors (or a tensor and a parameter set) disagree on shape.
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// An operation was invoked with the wrong parameter kind.
    KindMismatch { op: &'static str, got: &'static str },
    /// A batch-norm channel has too few elements for meaningful statistics.
    DegenerateStatistics { channel: usize, count: usize },
    /// A non-finite value was produced; index is into the flat data buffer.
    NonFinite {
        what: String,
        index: usize,
        value: f64,
    },
    /// Kernel/stride/padding combination does not fit the input extents.
    BadGeometry { op: &'static str, detail: String },
}

impl fmt::Display for TensorError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorError::DataLength { expected, got } => {
                write!(f, "data length {got} does not match shape product {expected}")
            }
            TensorError::ShapeMismatch { op, expected, got } => {
                write!(f, "{op}: shape mismatch, expected {expected:?}, got {got:?}")
            }
            TensorError::KindMismatch { op, got } => {
                write!(f, "{op}: wrong layer kind {got}")
            }
            TensorError::DegenerateStatistics { channel, count } => {
                write!(
                    f,
                    "batchnorm channel {channel} has {count} element(s); need at least 2"
                )
            }
            TensorError::NonFinite { what, index, value } => {
                write!(f, "non-finite value {value} in {what} at flat index {index}")
            }
            TensorError::BadGeometry { op, detail } => write!(f, "{op}: {detail}"),
        }
    }
}

impl std::error::Error for TensorError {}

/// Dense row-major tensor of `f64` values with an optional gradient buffer
/// of identical shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Zero-filled tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
        }
    }

    /// Constant-filled tensor.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    /// Build from an explicit data buffer; fails when the length does not
    /// match the shape product.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    /// Build by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
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

    /// Flat offset of a multi-index. Panics on rank mismatch or out-of-range
    /// coordinates; kernels do their own arithmetic and skip this.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        let mut off = 0;
        for (i, (&ix, &ext)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < ext, "index {ix} out of range {ext} at axis {i}");
            off = off * ext + ix;
        }
        off
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn at_mut(&mut self, index: &[usize]) -> &mut f64 {
        let off = self.offset(index);
        &mut self.data[off]
    }

    /// Gradient buffer, if one has been touched.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Gradient buffer, created zero-filled on first use.
    pub fn grad_mut(&mut self) -> &mut [f64] {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Add `delta` into the gradient buffer. Single-threaded by contract.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        assert_eq!(delta.len(), self.data.len(), "grad length mismatch");
        let g = self.grad_mut();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Elementwise sum of two tensors of identical shape.
    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            grad: None,
        })
    }

    /// Verify every value (and gradient, when present) is finite.
    /// Returns the contract-violation error on the first NaN/Inf found.
    pub fn check_finite(&self, what: &str) -> Result<(), TensorError> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(TensorError::NonFinite {
                    what: what.to_string(),
                    index: i,
                    value: v,
                });
            }
        }
        if let Some(g) = &self.grad {
            for (i, &v) in g.iter().enumerate() {
                if !v.is_finite() {
                    return Err(TensorError::NonFinite {
                        what: format!("{what}.grad"),
                        index: i,
                        value: v,
                    });
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        let err = Tensor::from_vec(&[2, 3], vec![1.0; 5]).unwrap_err();
        assert_eq!(err, TensorError::DataLength { expected: 6, got: 5 });
    }

    #[test]
    fn offset_is_row_major() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.at(&[0, 0, 0]), 0.0);
        assert_eq!(t.at(&[0, 0, 3]), 3.0);
        assert_eq!(t.at(&[0, 1, 0]), 4.0);
        assert_eq!(t.at(&[1, 0, 0]), 12.0);
        assert_eq!(t.at(&[1, 2, 3]), 23.0);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn check_finite_reports_index() {
        let mut t = Tensor::zeros(&[4]);
        t.data_mut()[2] = f64::NAN;
        let err = t.check_finite("probe").unwrap_err();
        match err {
            TensorError::NonFinite { index, .. } => assert_eq!(index, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }
}

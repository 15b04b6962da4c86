//! Dense-tensor substrate with reverse-mode differentiation.
//!
//! Everything runs in `f64`. A [`Tape`] records the forward ops of one pass
//! (define-by-run) and replays them in reverse for gradients; [`Params`] is a
//! named store of trainable tensors that gets bound onto a fresh tape each
//! pass. [`grad_check`] compares tape gradients against central finite
//! differences.

mod checkpoint;
mod gradcheck;
mod params;
mod tape;

pub use checkpoint::{load_checkpoint, load_checkpoint_validated, save_checkpoint, CheckpointError};
pub use gradcheck::{grad_check, GradCheckError, GradCheckReport, ParamCheck};
pub use params::{Bound, Params};
pub use tape::{Tape, TensorId};

use thiserror::Error;

/// Errors produced by tensor construction and tape operations.
#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape {shape:?} has {expected} elements but {got} values were given")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("matmul shape mismatch: left {left:?} is incompatible with right {right:?}")]
    MatmulShape { left: Vec<usize>, right: Vec<usize> },
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: expected rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("softmax axis {axis} out of range for shape of rank {rank}")]
    AxisOutOfRange { axis: usize, rank: usize },
    #[error("conv2d: input has {input} channels but kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error("conv2d: kernel sizes must be odd, got {kh}x{kw}")]
    EvenKernel { kh: usize, kw: usize },
    #[error("conv2d: output would be empty for input {h}x{w}, kernel {kh}x{kw}, stride {stride}, pad {pad}")]
    EmptyConvOutput {
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    },
    #[error("reshape: cannot view {from:?} ({from_len} values) as {to:?} ({to_len} values)")]
    BadReshape {
        from: Vec<usize>,
        from_len: usize,
        to: Vec<usize>,
        to_len: usize,
    },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward was already run on this tape; rebuild the forward pass first")]
    DoubleBackward,
    #[error("backward on an empty tape")]
    EmptyTape,
}

/// A dense row-major tensor of `f64` values.
///
/// Invariant: `data.len() == shape.iter().product()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::ShapeDataMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_data_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        match err {
            NumericsError::ShapeDataMismatch { expected, got, .. } => {
                assert_eq!(expected, 6);
                assert_eq!(got, 5);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn eye_is_identity() {
        let i = Tensor::eye(3);
        assert_eq!(i.data()[0], 1.0);
        assert_eq!(i.data()[1], 0.0);
        assert_eq!(i.data()[4], 1.0);
    }
}

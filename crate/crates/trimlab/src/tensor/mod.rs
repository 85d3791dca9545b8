//! Dense `f32` tensors and the reverse-mode tape that differentiates them.
//!
//! The tensor type is deliberately minimal: a shape, a flat row-major
//! buffer, and an optional gradient buffer of the same length. All actual
//! math lives on the [`Tape`](tape::Tape), which records every operation
//! and replays them in reverse for backpropagation.
//!
//! Determinism matters more than raw speed here: every kernel iterates in a
//! fixed order, so repeated runs produce bitwise-identical results. The
//! inner loops are written so the compiler can auto-vectorize them (simple
//! index-free slice walks, independent accumulators), which is as fast as
//! this crate needs to be.

pub mod tape;

pub use tape::{Gradients, Op, Tape, Value};

use crate::error::{Error, Result};

/// Whether a forward pass uses training or inference semantics.
///
/// Training mode draws dropout masks and uses batch statistics for
/// batch-norm (updating the running estimates); eval mode is deterministic,
/// uses the running estimates, and dropout is the exact identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A dense row-major tensor of `f32` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Option<Vec<f32>>,
    pub requires_grad: bool,
}

impl Tensor {
    /// Builds a tensor, checking that `data` matches the shape's element count.
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let want: usize = shape.iter().product();
        if data.len() != want {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                want,
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// An all-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
            grad: None,
            requires_grad: false,
        }
    }

    /// Builds a trainable tensor (requires_grad = true).
    pub fn param(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let mut t = Tensor::new(shape, data)?;
        t.requires_grad = true;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// True if every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dot product with eight independent accumulators.
///
/// Splitting the sum across accumulators removes the serial dependency
/// chain, which lets the compiler turn the loop into packed FMAs while the
/// iteration order — and therefore the result — stays fixed.
#[inline]
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let x = &a[i * 8..i * 8 + 8];
        let y = &b[i * 8..i * 8 + 8];
        for j in 0..8 {
            acc[j] += x[j] * y[j];
        }
    }
    let mut s = 0.0f32;
    for v in acc {
        s += v;
    }
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// `y += alpha * x`, elementwise over equal-length slices.
#[inline]
pub(crate) fn axpy(alpha: f32, x: &[f32], y: &mut [f32]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x.iter()) {
        *yi += alpha * xi;
    }
}

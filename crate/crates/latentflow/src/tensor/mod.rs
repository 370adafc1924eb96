//! Dense row-major tensors and the reverse-mode tape they run on.
//!
//! Everything numeric in this crate is generic over [`Element`], which is
//! implemented for `f32` and `f64`. Training and inference run in `f32`;
//! gradient checking runs the identical code in `f64` so central differences
//! have enough headroom to resolve a 1e-3 relative tolerance.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub(crate) mod kernels;
pub mod param;
pub mod rng;

pub use graph::{Graph, NodeId};
pub use param::{Bindings, Init, ParamStore};

use thiserror::Error;

/// Scalar type the tensor stack is generic over.
///
/// `from_f64`/`to_f64` exist so constants can be written once as `f64`
/// literals; the conversion is exact for every value this crate produces.
pub trait Element:
    num_traits::Float
    + num_traits::NumCast
    + Default
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("f64 converts to element type")
    }
    fn to_f64(self) -> f64 {
        <f64 as num_traits::NumCast>::from(self).expect("element type widens to f64")
    }
}

impl Element for f32 {}
impl Element for f64 {}

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: shapes {lhs:?} and {rhs:?} do not broadcast")]
    NotBroadcastable { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: axis {axis} out of range for rank-{rank} tensor")]
    AxisOutOfRange { op: &'static str, axis: usize, rank: usize },
    #[error("{op}: axis {axis} of shape {shape:?} is empty")]
    EmptyAxis { op: &'static str, axis: usize, shape: Vec<usize> },
    #[error("{op}: expected shape {shape:?} ({expected} values), got {got} values")]
    DataLength { op: &'static str, shape: Vec<usize>, expected: usize, got: usize },
    #[error("{op}: invalid argument: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("non-finite value produced by {context}")]
    NonFinite { context: String },
    #[error("parameter {name:?} registered twice")]
    DuplicateParam { name: String },
    #[error("unknown parameter {name:?}")]
    UnknownParam { name: String },
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Dense row-major tensor. The data length always equals the product of the
/// shape extents; a rank-0 tensor holds exactly one value.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); numel(shape)] }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: T) -> Self {
        Tensor { shape: Vec::new(), data: vec![v] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let expected = numel(shape);
        if data.len() != expected {
            return Err(TensorError::DataLength {
                op: "from_vec",
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Row-major offset of a multi-index.
    pub fn offset(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in idx.iter().enumerate() {
            debug_assert!(ix < self.shape[i], "index {idx:?} out of shape {:?}", self.shape);
            off = off * self.shape[i] + ix;
        }
        off
    }

    pub fn at(&self, idx: &[usize]) -> T {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: T) {
        let off = self.offset(idx);
        self.data[off] = v;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }

    /// Reinterprets the same data under a new shape of equal volume.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if numel(shape) != self.data.len() {
            return Err(TensorError::DataLength {
                op: "reshaped",
                shape: shape.to_vec(),
                expected: numel(shape),
                got: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }
}

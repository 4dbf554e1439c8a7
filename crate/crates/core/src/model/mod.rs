//! Differentiable model stack: per-modality encoders, a pluggable fusion
//! module and linear prediction heads, with hand-written backprop.

mod checkpoint;
mod fusion;
mod linear;
mod net;

pub use checkpoint::{Checkpoint, ParamEntry, CHECKPOINT_FORMAT};
pub use fusion::{ConcatCache, ConcatFusion, Fusion};
pub use linear::Linear;
pub use net::{Architecture, Encoder, ForwardPass, Gradients, MultimodalNet, NetRole};

use ndarray::{Array2, ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Fused feature with leading batch dimension, `b x c` or `b x c x h x w`.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedFeature<T> {
    values: ArrayD<T>,
}

impl<T: Scalar> FusedFeature<T> {
    pub fn new(values: ArrayD<T>) -> Result<Self> {
        if values.ndim() < 2 {
            return Err(Error::shape("FusedFeature rank", ">= 2", values.ndim()));
        }
        Ok(Self { values })
    }

    pub fn from_matrix(values: Array2<T>) -> Self {
        Self {
            values: values.into_dyn(),
        }
    }

    pub fn batch_size(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn values(&self) -> &ArrayD<T> {
        &self.values
    }

    /// Row-major flattening of all non-batch dimensions.
    pub fn to_matrix(&self) -> Array2<T> {
        let b = self.batch_size();
        let width = self.values.len() / b.max(1);
        let standard = self.values.as_standard_layout();
        Array2::from_shape_vec((b, width), standard.iter().copied().collect())
            .expect("element count matches")
    }

    /// Inverse of [`FusedFeature::to_matrix`] for this feature's shape.
    pub fn reshape_like(&self, flat: Array2<T>) -> Result<ArrayD<T>> {
        flat.into_shape_with_order(IxDyn(self.values.shape()))
            .map_err(|e| Error::shape("FusedFeature reshape", format!("{:?}", self.shape()), e))
    }
}

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;

use super::linear::{tanh, tanh_backward, Linear};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Combines the per-modality encoded features into one fused feature.
pub trait Fusion<T: Scalar>: Clone + Sized {
    type Cache;

    fn init<R: Rng + ?Sized>(
        num_modalities: usize,
        feature_width: usize,
        fused_width: usize,
        rng: &mut R,
    ) -> Self;

    fn fused_width(&self) -> usize;

    fn forward(&self, encoded: &[Array2<T>]) -> Result<(Array2<T>, Self::Cache)>;

    /// Returns gradients for [`Fusion::params`] (same order) and for each encoded input.
    fn backward(
        &self,
        cache: &Self::Cache,
        grad_out: &Array2<T>,
    ) -> (Vec<Array2<T>>, Vec<Array2<T>>);

    fn params(&self) -> Vec<(String, &Array2<T>)>;

    fn params_mut(&mut self) -> Vec<&mut Array2<T>>;
}

/// Channel concatenation followed by one affine map and `tanh`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcatFusion<T> {
    pub num_modalities: usize,
    pub feature_width: usize,
    pub proj: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct ConcatCache<T> {
    concat: Array2<T>,
    out: Array2<T>,
}

impl<T: Scalar> ConcatFusion<T> {
    pub fn concat(&self, encoded: &[Array2<T>]) -> Result<Array2<T>> {
        if encoded.len() != self.num_modalities {
            return Err(Error::shape("fuse", self.num_modalities, encoded.len()));
        }
        if let Some(bad) = encoded.iter().find(|e| e.ncols() != self.feature_width) {
            return Err(Error::shape("fuse width", self.feature_width, bad.ncols()));
        }
        let views: Vec<_> = encoded.iter().map(|e| e.view()).collect();
        concatenate(Axis(1), &views).map_err(|e| Error::shape("fuse rows", "equal batch sizes", e))
    }
}

impl<T: Scalar> Fusion<T> for ConcatFusion<T> {
    type Cache = ConcatCache<T>;

    fn init<R: Rng + ?Sized>(
        num_modalities: usize,
        feature_width: usize,
        fused_width: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            num_modalities,
            feature_width,
            proj: Linear::init(num_modalities * feature_width, fused_width, rng),
        }
    }

    fn fused_width(&self) -> usize {
        self.proj.fan_out()
    }

    fn forward(&self, encoded: &[Array2<T>]) -> Result<(Array2<T>, ConcatCache<T>)> {
        let concat = self.concat(encoded)?;
        let out = tanh(self.proj.forward(&concat));
        Ok((out.clone(), ConcatCache { concat, out }))
    }

    fn backward(
        &self,
        cache: &ConcatCache<T>,
        grad_out: &Array2<T>,
    ) -> (Vec<Array2<T>>, Vec<Array2<T>>) {
        let g = tanh_backward(&cache.out, grad_out);
        let (dw, db, dx) = self.proj.backward(&cache.concat, &g);
        let per_modality = (0..self.num_modalities)
            .map(|j| {
                dx.slice(ndarray::s![
                    ..,
                    j * self.feature_width..(j + 1) * self.feature_width
                ])
                .to_owned()
            })
            .collect();
        (vec![dw, db], per_modality)
    }

    fn params(&self) -> Vec<(String, &Array2<T>)> {
        vec![
            ("fusion.proj.weight".into(), &self.proj.weight),
            ("fusion.proj.bias".into(), &self.proj.bias),
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Array2<T>> {
        self.proj.params_mut().into_iter().collect()
    }
}

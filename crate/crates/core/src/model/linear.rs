use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::Uniform;

use crate::scalar::Scalar;

/// Affine map `x W + b`; `weight` is `in x out`, `bias` is `1 x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array2<T>,
}

impl<T: Scalar> Linear<T> {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
        Self {
            weight: Array2::from_shape_fn((fan_in, fan_out), |_| T::of(rng.sample(dist))),
            bias: Array2::zeros((1, fan_out)),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        x.dot(&self.weight) + &self.bias
    }

    /// Returns `(d_weight, d_bias, d_input)`.
    pub fn backward(
        &self,
        x: &Array2<T>,
        grad_out: &Array2<T>,
    ) -> (Array2<T>, Array2<T>, Array2<T>) {
        let d_weight = x.t().dot(grad_out);
        let d_bias = grad_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_input = grad_out.dot(&self.weight.t());
        (d_weight, d_bias, d_input)
    }

    pub fn params(&self) -> [&Array2<T>; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Array2<T>; 2] {
        [&mut self.weight, &mut self.bias]
    }
}

pub(crate) fn tanh<T: Scalar>(x: Array2<T>) -> Array2<T> {
    x.mapv_into(T::tanh)
}

/// Chain rule through `y = tanh(.)` given the activation output `y`.
pub(crate) fn tanh_backward<T: Scalar>(y: &Array2<T>, grad_out: &Array2<T>) -> Array2<T> {
    let mut g = grad_out.clone();
    g.zip_mut_with(y, |g, &y| *g *= T::one() - y * y);
    g
}

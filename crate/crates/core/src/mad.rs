//! Margin-aware distillation.
//!
//! The teacher and deployment fused features are each turned into a batch
//! relation matrix of pairwise cosine similarities. The per-sample relation
//! gap (row sum of the discrepancy) is weighted by a softmax over the
//! teacher's per-sample prediction entropy, so samples the teacher finds
//! ambiguous, i.e. those near a decision boundary, dominate the loss.
//!
//! Teacher quantities are treated as constants; gradients flow only into the
//! deployment feature.

use ndarray::{Array1, Array2, ArrayD, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::{softmax, softmax_entropy_rows};
use crate::model::FusedFeature;
use crate::scalar::Scalar;

/// Added to norm products so all-zero rows give zero similarity.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MadMode {
    /// Entropy-weighted relation distillation.
    #[default]
    Mad,
    /// Unweighted relation distillation (uniform `1/b` weights).
    Sp,
    Off,
}

/// How relation gaps are reduced over a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Discrepancy {
    /// `sum_j |r_t(i,j) - r_d(i,j)|`.
    #[default]
    Absolute,
    /// `sum_j (r_t(i,j) - r_d(i,j))`, which can cancel and go negative.
    Signed,
}

impl Discrepancy {
    pub fn from_signed_flag(signed: bool) -> Self {
        if signed {
            Discrepancy::Signed
        } else {
            Discrepancy::Absolute
        }
    }
}

/// Symmetric `b x b` cosine-similarity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix<T>(pub Array2<T>);

impl<T: Scalar> RelationMatrix<T> {
    pub fn values(&self) -> &Array2<T> {
        &self.0
    }

    pub fn batch_size(&self) -> usize {
        self.0.nrows()
    }
}

/// Per-sample teacher entropy and its batch softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct UncertaintyVector<T> {
    pub entropy: Array1<T>,
    pub weights: Array1<T>,
}

pub fn flatten_features<T: Scalar>(z: &FusedFeature<T>) -> Array2<T> {
    z.to_matrix()
}

fn row_norms<T: Scalar>(z: &Array2<T>) -> Array1<T> {
    z.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

pub fn relation_matrix<T: Scalar>(z: &Array2<T>) -> RelationMatrix<T> {
    let norms = row_norms(z);
    let eps = T::of(NORM_EPS);
    let mut r = z.dot(&z.t());
    for ((i, j), v) in r.indexed_iter_mut() {
        *v /= norms[i] * norms[j] + eps;
    }
    RelationMatrix(r)
}

/// Gradient of `sum_ij upstream(i,j) * R(i,j)` with respect to `z`.
pub fn relation_matrix_backward<T: Scalar>(z: &Array2<T>, upstream: &Array2<T>) -> Array2<T> {
    let b = z.nrows();
    let norms = row_norms(z);
    let eps = T::of(NORM_EPS);
    let dots = z.dot(&z.t());
    let sym = upstream + &upstream.t();
    let mut coupling: Array2<T> = Array2::zeros((b, b));
    let mut self_coef: Array1<T> = Array1::zeros(b);
    for a in 0..b {
        for j in 0..b {
            let den = norms[a] * norms[j] + eps;
            coupling[[a, j]] = sym[[a, j]] / den;
            self_coef[a] += sym[[a, j]] * dots[[a, j]] * norms[j] / (den * den);
        }
    }
    let mut grad = coupling.dot(z);
    for (a, mut row) in grad.rows_mut().into_iter().enumerate() {
        if norms[a] > T::zero() {
            let c = self_coef[a] / norms[a];
            row.zip_mut_with(&z.row(a), |g, &za| *g -= c * za);
        }
    }
    grad
}

pub fn relation_discrepancy<T: Scalar>(
    r_t: &RelationMatrix<T>,
    r_d: &RelationMatrix<T>,
    mode: Discrepancy,
) -> Result<Array1<T>> {
    if r_t.0.dim() != r_d.0.dim() {
        return Err(Error::shape(
            "relation_discrepancy",
            format!("{:?}", r_t.0.dim()),
            format!("{:?}", r_d.0.dim()),
        ));
    }
    let diff = &r_t.0 - &r_d.0;
    Ok(match mode {
        Discrepancy::Absolute => diff.mapv(T::abs).sum_axis(Axis(1)),
        Discrepancy::Signed => diff.sum_axis(Axis(1)),
    })
}

pub fn classification_uncertainty<T: Scalar>(teacher_logits: &Array2<T>) -> UncertaintyVector<T> {
    let entropy = softmax_entropy_rows(teacher_logits);
    let weights = softmax(entropy.view());
    UncertaintyVector { entropy, weights }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MadOutput<T> {
    pub loss: T,
    /// Gradient of the loss with respect to the deployment feature, in its shape.
    pub grad: ArrayD<T>,
    pub discrepancy: Array1<T>,
    pub weights: Array1<T>,
}

/// Distillation loss between teacher feature `z_t` and deployment feature
/// `z_d`, weighted by teacher logits `y_t` in [`MadMode::Mad`].
pub fn mad_loss<T: Scalar>(
    z_t: &FusedFeature<T>,
    z_d: &FusedFeature<T>,
    y_t: &Array2<T>,
    mode: MadMode,
    discrepancy: Discrepancy,
) -> Result<MadOutput<T>> {
    let b = z_d.batch_size();
    if mode == MadMode::Off {
        return Ok(MadOutput {
            loss: T::zero(),
            grad: ArrayD::zeros(z_d.shape()),
            discrepancy: Array1::zeros(b),
            weights: Array1::zeros(b),
        });
    }
    if b < 2 {
        return Err(Error::Contract(format!(
            "relation distillation needs a batch of at least 2, got {b}"
        )));
    }
    if z_t.batch_size() != b || y_t.nrows() != b {
        return Err(Error::shape(
            "mad_loss batch alignment",
            b,
            format!(
                "teacher feature {} / logits {}",
                z_t.batch_size(),
                y_t.nrows()
            ),
        ));
    }
    let zt = flatten_features(z_t);
    let zd = flatten_features(z_d);
    let r_t = relation_matrix(&zt);
    let r_d = relation_matrix(&zd);
    let gaps = relation_discrepancy(&r_t, &r_d, discrepancy)?;
    let weights = match mode {
        MadMode::Mad => classification_uncertainty(y_t).weights,
        MadMode::Sp => Array1::from_elem(b, T::one() / T::of_usize(b)),
        MadMode::Off => unreachable!(),
    };
    let loss = weights.dot(&gaps);

    // dL/dr_d(i,j) = -w_i * d|r_t - r_d|, or -w_i for the signed sum
    let mut upstream = &r_t.0 - &r_d.0;
    for (i, mut row) in upstream.rows_mut().into_iter().enumerate() {
        let w = weights[i];
        row.mapv_inplace(|d| match discrepancy {
            Discrepancy::Absolute => -w * sign(d),
            Discrepancy::Signed => -w,
        });
    }
    let grad_flat = relation_matrix_backward(&zd, &upstream);
    Ok(MadOutput {
        loss,
        grad: z_d.reshape_like(grad_flat)?,
        discrepancy: gaps,
        weights,
    })
}

fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

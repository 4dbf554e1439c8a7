//! Row-wise softmax helpers and the cross-entropy task loss.

use ndarray::{Array1, Array2, ArrayView1, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub fn log_softmax_row<T: Scalar>(row: ArrayView1<'_, T>) -> Array1<T> {
    let max = row.fold(T::neg_infinity(), |a, &b| a.max(b));
    let shifted = row.mapv(|v| v - max);
    let lse = shifted.mapv(T::exp).sum().ln();
    shifted.mapv_into(|v| v - lse)
}

pub fn softmax_rows<T: Scalar>(logits: &Array2<T>) -> Array2<T> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let lsm = log_softmax_row(row.view());
        row.assign(&lsm.mapv(T::exp));
    }
    out
}

/// Softmax over a vector. Equal inputs map to exactly `1/n`.
pub fn softmax<T: Scalar>(values: ArrayView1<'_, T>) -> Array1<T> {
    let max = values.fold(T::neg_infinity(), |a, &b| a.max(b));
    let exps = values.mapv(|v| (v - max).exp());
    let total = exps.sum();
    exps.mapv_into(|e| e / total)
}

/// Mean cross-entropy over the rows of `logits`, with its gradient.
///
/// An empty batch yields zero loss and an empty gradient.
pub fn cross_entropy<T: Scalar>(logits: &Array2<T>, labels: &[usize]) -> Result<(T, Array2<T>)> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::shape("cross_entropy labels", b, labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::shape(
            "cross_entropy label range",
            format!("< {k}"),
            bad,
        ));
    }
    if b == 0 {
        return Ok((T::zero(), Array2::zeros((0, k))));
    }
    let scale = T::one() / T::of_usize(b);
    let mut grad = Array2::zeros((b, k));
    let mut total = T::zero();
    for ((row, mut g), &label) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let lsm = log_softmax_row(row);
        total -= lsm[label];
        g.assign(&lsm.mapv(|v| v.exp() * scale));
        g[label] -= scale;
    }
    Ok((total * scale, grad))
}

/// Shannon entropy (natural log) of each row's softmax.
pub fn softmax_entropy_rows<T: Scalar>(logits: &Array2<T>) -> Array1<T> {
    logits
        .axis_iter(Axis(0))
        .map(|row| {
            let lsm = log_softmax_row(row);
            -lsm.iter().map(|&l| l.exp() * l).sum::<T>()
        })
        .collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: ArrayView1<'_, T>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cross_entropy_matches_hand_value() {
        let logits = array![[0.0f64, 0.0], [2.0, 0.0]];
        let (loss, grad) = cross_entropy(&logits, &[0, 1]).unwrap();
        let expected = (2f64.ln() + (1.0 + 2f64.exp()).ln()) / 2.0;
        assert!((loss - expected).abs() < 1e-12);
        assert!(grad.rows().into_iter().all(|r| r.sum().abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = array![[0.3f64, -1.2, 0.5], [2.0, 0.1, -0.7]];
        let labels = [2, 0];
        let (_, grad) = cross_entropy(&logits, &labels).unwrap();
        let h = 1e-6;
        for idx in [(0, 0), (0, 2), (1, 1)] {
            let mut up = logits.clone();
            up[idx] += h;
            let mut dn = logits.clone();
            dn[idx] -= h;
            let fd = (cross_entropy(&up, &labels).unwrap().0
                - cross_entropy(&dn, &labels).unwrap().0)
                / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = array![[0.0f32, 0.0]];
        assert!(cross_entropy(&logits, &[2]).is_err());
        assert!(cross_entropy(&logits, &[0, 1]).is_err());
        let empty = Array2::<f32>::zeros((0, 2));
        assert_eq!(cross_entropy(&empty, &[]).unwrap().0, 0.0);
    }

    #[test]
    fn entropy_of_uniform_is_log_k() {
        let e = softmax_entropy_rows(&array![[0.0f64, 0.0], [1.0, 1.0], [-3.0, -3.0]]);
        assert!(e.iter().all(|v| (v - 2f64.ln()).abs() < 1e-12));
        let softmax_large = softmax_rows(&array![[1000.0f64, 0.0]]);
        assert!(softmax_large.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(array![1.0f64, 3.0, 3.0].view()), 1);
        assert_eq!(argmax(array![0.0f64, 0.0].view()), 0);
    }
}

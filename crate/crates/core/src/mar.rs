//! Modality-aware regularization.
//!
//! During the warm-up epochs the deployment network is evaluated on a fixed
//! train subsample under the full pattern and under each single-modality
//! drop. The predicted-class histograms are compared by KL divergence; the
//! per-epoch divergence vectors are stored in a memory bank and averaged.
//! The modality whose removal moves the prediction distribution the most is
//! the strong modality, and every nonempty pattern lacking it is weak. After
//! warm-up the extra regularization head is trained with the task loss on
//! weak-pattern samples only.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{enumerate_patterns, DropoutPattern, ModalityBatch};
use crate::error::{Error, Result};
use crate::loss::{argmax, cross_entropy};
use crate::model::{Fusion, MultimodalNet, NetRole};
use crate::scalar::Scalar;

/// Additive smoothing applied to class counts before normalizing.
pub const HISTOGRAM_SMOOTHING: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarMode {
    /// Regularize the mined weak combinations.
    #[default]
    Mar,
    /// Regularize the single-modality combinations only.
    Sr,
    Off,
}

/// How class counts become a probability row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HistogramNormalization {
    /// `(count + eps) / (n + k eps)`.
    #[default]
    Smoothed,
    /// Softmax of the raw counts.
    SoftmaxOfCounts,
}

/// Logits `(m + 1) x n x k`; slice 0 is the full pattern, slice `j + 1` drops modality `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternPredictionTensor<T>(pub Array3<T>);

#[derive(Debug, Clone, PartialEq)]
pub struct ClassHistogram {
    /// `(m + 1) x k` predicted-class counts.
    pub counts: Array2<usize>,
    /// Normalized rows.
    pub probs: Array2<f64>,
}

pub fn collect_pattern_predictions<T: Scalar, F: Fusion<T>>(
    net: &MultimodalNet<T, F>,
    eval_subset: &ModalityBatch<T>,
    mining_patterns: &[DropoutPattern],
) -> Result<PatternPredictionTensor<T>> {
    if eval_subset.is_empty() {
        return Err(Error::Contract(
            "mining needs a nonempty evaluation subset".into(),
        ));
    }
    if net.role() != NetRole::Deployment {
        return Err(Error::Contract(
            "mining runs on the deployment network".into(),
        ));
    }
    let n = eval_subset.len();
    let k = net.architecture().num_classes;
    let mut out = Array3::zeros((mining_patterns.len(), n, k));
    for (i, pattern) in mining_patterns.iter().enumerate() {
        let logits = net.predict(&eval_subset.with_pattern(pattern)?)?;
        out.index_axis_mut(Axis(0), i).assign(&logits);
    }
    Ok(PatternPredictionTensor(out))
}

pub fn class_histogram<T: Scalar>(
    predictions: &PatternPredictionTensor<T>,
    normalization: HistogramNormalization,
) -> ClassHistogram {
    let (p, n, k) = predictions.0.dim();
    let mut counts = Array2::zeros((p, k));
    for (i, slice) in predictions.0.outer_iter().enumerate() {
        for row in slice.rows() {
            counts[[i, argmax(row)]] += 1;
        }
    }
    let probs = match normalization {
        HistogramNormalization::Smoothed => {
            let denom = n as f64 + k as f64 * HISTOGRAM_SMOOTHING;
            counts.mapv(|c| (c as f64 + HISTOGRAM_SMOOTHING) / denom)
        }
        HistogramNormalization::SoftmaxOfCounts => {
            let mut probs = counts.mapv(|c| c as f64);
            for mut row in probs.rows_mut() {
                let s = crate::loss::softmax(row.view());
                row.assign(&s);
            }
            probs
        }
    };
    ClassHistogram { counts, probs }
}

/// `KL(p || q) = sum_j p_j (ln p_j - ln q_j)`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pj, &qj)| {
            if pj > 0.0 {
                pj * (pj.ln() - qj.ln())
            } else {
                0.0
            }
        })
        .sum()
}

/// `g_d[j] = KL(P_full || P_drop_j)` for each modality `j`.
pub fn pattern_divergence(hist: &ClassHistogram) -> Array1<f64> {
    let full = hist.probs.row(0).to_vec();
    hist.probs
        .outer_iter()
        .skip(1)
        .map(|row| kl_divergence(&full, &row.to_vec()))
        .collect()
}

/// Warm-up memory bank and the frozen mining decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningState {
    /// `N x m`, row `e - 1` holds the divergence vector of warm-up epoch `e`.
    pub memory_bank: Vec<Vec<f64>>,
    pub epochs_recorded: usize,
    pub mean_divergence: Option<Vec<f64>>,
    /// 0-based index of the strong modality.
    pub strong_modality: Option<usize>,
    pub omega: Option<Vec<DropoutPattern>>,
    pub frozen: bool,
}

impl MiningState {
    pub fn new(warmup_epochs: usize, num_modalities: usize) -> Result<Self> {
        if warmup_epochs == 0 {
            return Err(Error::config("mar.warmup_epochs", "must be at least 1"));
        }
        if num_modalities < 2 {
            return Err(Error::config("num_modalities", "must be at least 2"));
        }
        Ok(Self {
            memory_bank: vec![vec![0.0; num_modalities]; warmup_epochs],
            epochs_recorded: 0,
            mean_divergence: None,
            strong_modality: None,
            omega: None,
            frozen: false,
        })
    }

    pub fn warmup_epochs(&self) -> usize {
        self.memory_bank.len()
    }

    pub fn num_modalities(&self) -> usize {
        self.memory_bank[0].len()
    }

    /// Stores the divergence vector of warm-up epoch `epoch` (1-based).
    pub fn update(&mut self, divergence: &[f64], epoch: usize) -> Result<()> {
        if self.frozen {
            return Err(Error::Contract(
                "memory bank update after mining was frozen".into(),
            ));
        }
        if epoch == 0 || epoch > self.warmup_epochs() {
            return Err(Error::Contract(format!(
                "memory bank update at epoch {epoch} outside warm-up 1..={}",
                self.warmup_epochs()
            )));
        }
        if epoch != self.epochs_recorded + 1 {
            return Err(Error::Contract(format!(
                "memory bank expects epoch {}, got {epoch}",
                self.epochs_recorded + 1
            )));
        }
        if divergence.len() != self.num_modalities() {
            return Err(Error::shape(
                "memory bank row",
                self.num_modalities(),
                divergence.len(),
            ));
        }
        self.memory_bank[epoch - 1] = divergence.to_vec();
        self.epochs_recorded += 1;
        Ok(())
    }

    /// Averages the memory bank, picks the strong modality and freezes the weak set.
    pub fn finalize(&mut self) -> Result<()> {
        if self.frozen {
            return Err(Error::Contract("mining already finalized".into()));
        }
        if self.epochs_recorded != self.warmup_epochs() {
            return Err(Error::Contract(format!(
                "mining finalized after {} of {} warm-up epochs",
                self.epochs_recorded,
                self.warmup_epochs()
            )));
        }
        let m = self.num_modalities();
        let n = self.warmup_epochs() as f64;
        let mean: Vec<f64> = (0..m)
            .map(|j| self.memory_bank.iter().map(|row| row[j]).sum::<f64>() / n)
            .collect();
        let strong = argmax(ndarray::ArrayView1::from(&mean));
        if mean.iter().filter(|&&v| v == mean[strong]).count() > 1 {
            log::warn!("mining tie: averaged divergences {mean:?}; choosing modality {strong}");
        }
        let omega = enumerate_patterns(m)?
            .all
            .into_iter()
            .filter(|p| !p.is_present(strong))
            .collect();
        self.mean_divergence = Some(mean);
        self.strong_modality = Some(strong);
        self.omega = Some(omega);
        self.frozen = true;
        Ok(())
    }

    /// `mask[i]` is true iff sample `i`'s pattern lies in the weak set.
    pub fn weak_mask(&self, patterns: &[DropoutPattern]) -> Result<Vec<bool>> {
        let omega = match (&self.omega, self.frozen) {
            (Some(o), true) => o,
            _ => {
                return Err(Error::Contract(
                    "weak mask requested before mining froze".into(),
                ))
            }
        };
        Ok(patterns.iter().map(|p| omega.contains(p)).collect())
    }
}

/// Samples whose pattern keeps exactly one modality.
pub fn single_modality_mask(patterns: &[DropoutPattern]) -> Vec<bool> {
    patterns.iter().map(|p| p.num_present() == 1).collect()
}

/// Mean cross-entropy of `reg_logits` over the rows selected by `mask`,
/// with a full-size gradient that is zero on unselected rows. No selected
/// rows gives zero loss.
pub fn mar_loss<T: Scalar>(
    reg_logits: &Array2<T>,
    labels: &[usize],
    mask: &[bool],
) -> Result<(T, Array2<T>)> {
    let b = reg_logits.nrows();
    if labels.len() != b || mask.len() != b {
        return Err(Error::shape(
            "mar_loss",
            b,
            format!("{} labels / {} mask entries", labels.len(), mask.len()),
        ));
    }
    let rows: Vec<usize> = (0..b).filter(|&i| mask[i]).collect();
    let mut grad = Array2::zeros(reg_logits.raw_dim());
    if rows.is_empty() {
        return Ok((T::zero(), grad));
    }
    let sel_labels: Vec<usize> = rows.iter().map(|&i| labels[i]).collect();
    let (loss, sel_grad) = cross_entropy(&reg_logits.select(Axis(0), &rows), &sel_labels)?;
    for (g, &i) in sel_grad.rows().into_iter().zip(&rows) {
        grad.row_mut(i).assign(&g);
    }
    Ok((loss, grad))
}

/// Structured record of the warm-up mining run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub modality_names: Vec<String>,
    /// One divergence row per warm-up epoch.
    pub epoch_divergence: Vec<Vec<f64>>,
    pub mean_divergence: Vec<f64>,
    pub strong_modality: usize,
    pub strong_modality_name: String,
    pub weak_combinations: Vec<String>,
}

impl MiningReport {
    pub fn from_state(state: &MiningState, names: &[String]) -> Result<Self> {
        let (Some(mean), Some(strong), Some(omega)) =
            (&state.mean_divergence, state.strong_modality, &state.omega)
        else {
            return Err(Error::Contract(
                "mining report requested before finalization".into(),
            ));
        };
        Ok(Self {
            modality_names: names.to_vec(),
            epoch_divergence: state.memory_bank[..state.epochs_recorded].to_vec(),
            mean_divergence: mean.clone(),
            strong_modality: strong,
            strong_modality_name: names[strong].clone(),
            weak_combinations: omega.iter().map(|p| p.label(names)).collect(),
        })
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let header = self
            .modality_names
            .iter()
            .map(|n| format!("drop {n}"))
            .collect::<Vec<_>>();
        writeln!(out, "epoch\t{}", header.join("\t")).unwrap();
        for (e, row) in self.epoch_divergence.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6e}")).collect();
            writeln!(out, "{}\t{}", e + 1, cells.join("\t")).unwrap();
        }
        let cells: Vec<String> = self
            .mean_divergence
            .iter()
            .map(|v| format!("{v:.6e}"))
            .collect();
        writeln!(out, "mean\t{}", cells.join("\t")).unwrap();
        writeln!(out, "strong modality: {}", self.strong_modality_name).unwrap();
        writeln!(
            out,
            "weak combinations: {}",
            self.weak_combinations.join(", ")
        )
        .unwrap();
        out
    }
}

//! Synthetic multimodal datasets with planted per-modality signal strength,
//! and the modality-dropout pattern machinery.
//!
//! Each modality `j` of class `c` is drawn as `snr_j * u_{j,c} + N(0, I)`,
//! where the `u_{j,c}` are unit class directions centred across classes.
//! For two classes the directions are antipodal, so the Bayes error of
//! modality `j` alone is exactly `Phi(-snr_j)`.

use std::fmt;
use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which modalities are present in one forward pass.
#[derive(Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<bool>", into = "Vec<bool>")]
pub struct DropoutPattern {
    present: Vec<bool>,
}

impl DropoutPattern {
    pub fn new(present: Vec<bool>) -> Result<Self> {
        if !present.iter().any(|&p| p) {
            return Err(Error::Contract(
                "a dropout pattern must keep at least one modality".into(),
            ));
        }
        Ok(Self { present })
    }

    /// All modalities present.
    pub fn full(num_modalities: usize) -> Self {
        Self {
            present: vec![true; num_modalities],
        }
    }

    /// Every modality except `dropped` (0-based). Needs at least two modalities.
    pub fn without(num_modalities: usize, dropped: usize) -> Self {
        assert!(num_modalities >= 2 && dropped < num_modalities);
        let mut present = vec![true; num_modalities];
        present[dropped] = false;
        Self { present }
    }

    /// Decode a canonical code in `1..2^m`; bit `m-1-j` is modality `j`.
    pub fn from_code(num_modalities: usize, code: usize) -> Result<Self> {
        let present = (0..num_modalities)
            .map(|j| code >> (num_modalities - 1 - j) & 1 == 1)
            .collect();
        Self::new(present)
    }

    pub fn code(&self) -> usize {
        self.present
            .iter()
            .fold(0, |acc, &p| (acc << 1) | usize::from(p))
    }

    pub fn num_modalities(&self) -> usize {
        self.present.len()
    }

    pub fn is_present(&self, modality: usize) -> bool {
        self.present[modality]
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn num_present(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    pub fn is_full(&self) -> bool {
        self.present.iter().all(|&p| p)
    }

    /// Modality names of present modalities joined by `+`.
    pub fn label(&self, names: &[String]) -> String {
        self.present
            .iter()
            .zip(names)
            .filter(|(&p, _)| p)
            .map(|(_, n)| n.as_str())
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl TryFrom<Vec<bool>> for DropoutPattern {
    type Error = Error;

    fn try_from(present: Vec<bool>) -> Result<Self> {
        Self::new(present)
    }
}

impl From<DropoutPattern> for Vec<bool> {
    fn from(p: DropoutPattern) -> Self {
        p.present
    }
}

impl fmt::Debug for DropoutPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (j, &p) in self.present.iter().enumerate() {
            if j > 0 {
                f.write_str(",")?;
            }
            f.write_str(if p { "T" } else { "F" })?;
        }
        f.write_str("]")
    }
}

/// The two pattern families used by mining and by evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternFamilies {
    /// `[full, drop modality 0, drop modality 1, ...]`, length `m + 1`.
    pub mining: Vec<DropoutPattern>,
    /// All `2^m - 1` nonempty patterns ordered by binary code, modality 0
    /// being the most significant bit.
    pub all: Vec<DropoutPattern>,
}

pub fn enumerate_patterns(num_modalities: usize) -> Result<PatternFamilies> {
    if num_modalities < 2 {
        return Err(Error::config(
            "num_modalities",
            format!("need at least 2 modalities, got {num_modalities}"),
        ));
    }
    if num_modalities >= usize::BITS as usize {
        return Err(Error::config("num_modalities", "too many modalities"));
    }
    let mut mining = vec![DropoutPattern::full(num_modalities)];
    mining.extend((0..num_modalities).map(|j| DropoutPattern::without(num_modalities, j)));
    let all = (1..1usize << num_modalities)
        .map(|code| DropoutPattern::from_code(num_modalities, code))
        .collect::<Result<_>>()?;
    Ok(PatternFamilies { mining, all })
}

/// How training-time dropout patterns are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DropoutPolicy {
    /// Uniform over the `2^m - 1` nonempty patterns.
    #[default]
    Uniform,
    /// Independent keep probability per modality, resampled until nonempty.
    Bernoulli { keep_prob: f64 },
}

impl DropoutPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DropoutPolicy::Uniform => Ok(()),
            DropoutPolicy::Bernoulli { keep_prob } if keep_prob > 0.0 && keep_prob <= 1.0 => Ok(()),
            DropoutPolicy::Bernoulli { keep_prob } => Err(Error::config(
                "dropout.keep_prob",
                format!("must lie in (0, 1], got {keep_prob}"),
            )),
        }
    }
}

pub fn sample_dropout_pattern<R: Rng + ?Sized>(
    num_modalities: usize,
    rng: &mut R,
    policy: DropoutPolicy,
) -> DropoutPattern {
    assert!(num_modalities >= 2, "dropout needs at least two modalities");
    match policy {
        DropoutPolicy::Uniform => {
            let code = rng.random_range(1..1usize << num_modalities);
            DropoutPattern::from_code(num_modalities, code).expect("nonzero code")
        }
        DropoutPolicy::Bernoulli { keep_prob } => loop {
            let present: Vec<bool> = (0..num_modalities)
                .map(|_| rng.random_bool(keep_prob))
                .collect();
            if let Ok(p) = DropoutPattern::new(present) {
                return p;
            }
        },
    }
}

/// Replaces dropped modalities by all-zero arrays of the same shape.
pub fn apply_dropout<T: Scalar>(
    features: &[Array2<T>],
    pattern: &DropoutPattern,
) -> Result<Vec<Array2<T>>> {
    if features.len() != pattern.num_modalities() {
        return Err(Error::shape(
            "apply_dropout",
            format!("{} modalities", pattern.num_modalities()),
            features.len(),
        ));
    }
    Ok(features
        .iter()
        .zip(pattern.present())
        .map(|(x, &keep)| {
            if keep {
                x.clone()
            } else {
                Array2::zeros(x.raw_dim())
            }
        })
        .collect())
}

fn default_test_fraction() -> f64 {
    0.3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub num_modalities: usize,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub feature_dim: usize,
    /// Class-signal magnitude over unit noise, one entry per modality.
    pub snr: Vec<f64>,
    pub seed: u64,
    /// Fraction of each class held out for testing.
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Display names; defaults to RGB/Depth/IR for three modalities.
    #[serde(default)]
    pub modality_names: Option<Vec<String>>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_modalities < 2 {
            return Err(Error::config(
                "dataset.num_modalities",
                "must be at least 2",
            ));
        }
        if self.num_modalities > 16 {
            return Err(Error::config(
                "dataset.num_modalities",
                "must be at most 16",
            ));
        }
        if self.num_classes < 2 {
            return Err(Error::config("dataset.num_classes", "must be at least 2"));
        }
        if self.feature_dim < 1 {
            return Err(Error::config("dataset.feature_dim", "must be at least 1"));
        }
        if self.snr.len() != self.num_modalities {
            return Err(Error::config(
                "dataset.snr",
                format!(
                    "expected {} entries, got {}",
                    self.num_modalities,
                    self.snr.len()
                ),
            ));
        }
        if let Some(bad) = self.snr.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return Err(Error::config(
                "dataset.snr",
                format!("entries must be finite and nonnegative, got {bad}"),
            ));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::config("dataset.test_fraction", "must lie in (0, 1)"));
        }
        let n_test = self.test_per_class();
        if n_test == 0 || n_test >= self.samples_per_class {
            return Err(Error::config(
                "dataset.samples_per_class",
                format!(
                    "{} samples per class leaves an empty train or test split",
                    self.samples_per_class
                ),
            ));
        }
        if let Some(names) = &self.modality_names {
            if names.len() != self.num_modalities {
                return Err(Error::config(
                    "dataset.modality_names",
                    format!(
                        "expected {} names, got {}",
                        self.num_modalities,
                        names.len()
                    ),
                ));
            }
        }
        Ok(())
    }

    fn test_per_class(&self) -> usize {
        (self.samples_per_class as f64 * self.test_fraction).round() as usize
    }

    pub fn modality_names(&self) -> Vec<String> {
        match &self.modality_names {
            Some(names) => names.clone(),
            None if self.num_modalities == 3 => {
                vec!["RGB".into(), "Depth".into(), "IR".into()]
            }
            None => (0..self.num_modalities).map(|j| format!("M{j}")).collect(),
        }
    }
}

/// Per-modality input arrays, labels and per-sample dropout patterns.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBatch<T> {
    features: Vec<Array2<T>>,
    labels: Vec<usize>,
    patterns: Vec<DropoutPattern>,
}

impl<T: Scalar> ModalityBatch<T> {
    pub fn new(
        features: Vec<Array2<T>>,
        labels: Vec<usize>,
        patterns: Vec<DropoutPattern>,
    ) -> Result<Self> {
        let b = labels.len();
        let m = features.len();
        if m == 0 {
            return Err(Error::shape("ModalityBatch", "at least one modality", 0));
        }
        for x in &features {
            if x.nrows() != b {
                return Err(Error::shape("ModalityBatch rows", b, x.nrows()));
            }
        }
        if patterns.len() != b {
            return Err(Error::shape("ModalityBatch patterns", b, patterns.len()));
        }
        if let Some(p) = patterns.iter().find(|p| p.num_modalities() != m) {
            return Err(Error::shape(
                "ModalityBatch pattern width",
                m,
                p.num_modalities(),
            ));
        }
        Ok(Self {
            features,
            labels,
            patterns,
        })
    }

    /// Batch with every modality present for every sample.
    pub fn complete(features: Vec<Array2<T>>, labels: Vec<usize>) -> Result<Self> {
        let patterns = vec![DropoutPattern::full(features.len()); labels.len()];
        Self::new(features, labels, patterns)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.features.len()
    }

    pub fn features(&self) -> &[Array2<T>] {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn patterns(&self) -> &[DropoutPattern] {
        &self.patterns
    }

    pub fn is_complete(&self) -> bool {
        self.patterns.iter().all(DropoutPattern::is_full)
    }

    /// Rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            features: self
                .features
                .iter()
                .map(|x| x.select(Axis(0), indices))
                .collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            patterns: indices.iter().map(|&i| self.patterns[i].clone()).collect(),
        }
    }

    pub fn with_patterns(&self, patterns: Vec<DropoutPattern>) -> Result<Self> {
        Self::new(self.features.clone(), self.labels.clone(), patterns)
    }

    /// Same samples with `pattern` forced on every row.
    pub fn with_pattern(&self, pattern: &DropoutPattern) -> Result<Self> {
        self.with_patterns(vec![pattern.clone(); self.len()])
    }

    /// Writes one sample per row; header columns `m{j}_f{i}` then `label`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        let mut header: Vec<String> = Vec::new();
        for (j, x) in self.features.iter().enumerate() {
            header.extend((0..x.ncols()).map(|i| format!("m{j}_f{i}")));
        }
        header.push("label".into());
        writeln!(out, "{}", header.join(",")).expect("write to Vec");
        for (i, label) in self.labels.iter().enumerate() {
            let mut row: Vec<String> = Vec::new();
            for x in &self.features {
                row.extend(x.row(i).iter().map(|v| v.to_f64_lossless().to_string()));
            }
            row.push(label.to_string());
            writeln!(out, "{}", row.join(",")).expect("write to Vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// Generated train/test split plus the generating parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub spec: DatasetSpec,
    pub train: ModalityBatch<T>,
    pub test: ModalityBatch<T>,
    /// Per modality, a `k x d` matrix of class means (already scaled by snr).
    pub class_means: Vec<Array2<f64>>,
    /// Closed-form single-modality Bayes error; only available for two classes.
    pub bayes_error: Vec<Option<f64>>,
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn unit_class_directions(rng: &mut ChaCha8Rng, k: usize, d: usize) -> Array2<f64> {
    loop {
        let mut dirs = Array2::from_shape_fn((k, d), |_| rng.sample::<f64, _>(StandardNormal));
        let centre = dirs.mean_axis(Axis(0)).expect("k >= 2");
        dirs -= &centre;
        let mut degenerate = false;
        for mut row in dirs.rows_mut() {
            let norm = row.dot(&row).sqrt();
            if norm < 1e-8 {
                degenerate = true;
                break;
            }
            row /= norm;
        }
        if !degenerate {
            return dirs;
        }
    }
}

pub fn generate_dataset<T: Scalar>(spec: &DatasetSpec) -> Result<Dataset<T>> {
    spec.validate()?;
    let (m, k, d) = (spec.num_modalities, spec.num_classes, spec.feature_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let class_means: Vec<Array2<f64>> = spec
        .snr
        .iter()
        .map(|&snr| unit_class_directions(&mut rng, k, d) * snr)
        .collect();

    let bayes_error = class_means
        .iter()
        .map(|means| {
            (k == 2).then(|| {
                let gap = &means.row(1) - &means.row(0);
                normal_cdf(-gap.dot(&gap).sqrt() / 2.0)
            })
        })
        .collect();

    let n_test_per_class = spec.test_per_class();
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    let n = k * spec.samples_per_class;
    let mut labels = Vec::with_capacity(n);
    let mut features: Vec<Array2<T>> = (0..m).map(|_| Array2::zeros((n, d))).collect();
    for c in 0..k {
        let start = c * spec.samples_per_class;
        for s in 0..spec.samples_per_class {
            let row = start + s;
            labels.push(c);
            for (x, means) in features.iter_mut().zip(&class_means) {
                for f in 0..d {
                    let noise: f64 = rng.sample(StandardNormal);
                    x[[row, f]] = T::of(means[[c, f]] + noise);
                }
            }
        }
        let mut order: Vec<usize> = (start..start + spec.samples_per_class).collect();
        order.shuffle(&mut rng);
        test_idx.extend_from_slice(&order[..n_test_per_class]);
        train_idx.extend_from_slice(&order[n_test_per_class..]);
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();

    let all = ModalityBatch::complete(features, labels)?;
    Ok(Dataset {
        spec: spec.clone(),
        train: all.select(&train_idx),
        test: all.select(&test_idx),
        class_means,
        bayes_error,
    })
}

//! Run configuration, read from a single TOML file.
//!
//! Every table rejects unknown keys. A minimal file only needs `[dataset]`;
//! everything else falls back to the desk-scale defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSpec, DropoutPolicy};
use crate::error::{Error, Result};
use crate::mad::{Discrepancy, MadMode};
use crate::mar::{HistogramNormalization, MarMode};
use crate::model::Architecture;
use crate::optim::{OptimMethod, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_width: usize,
    pub feature_width: usize,
    pub fused_width: usize,
    /// Teacher fused width; defaults to `fused_width`.
    pub teacher_fused_width: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_width: 32,
            feature_width: 16,
            fused_width: 32,
            teacher_fused_width: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: OptimizerConfig,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            optim: OptimizerConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub dropout: DropoutPolicy,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            dropout: DropoutPolicy::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MadConfig {
    pub mode: MadMode,
    pub alpha: f64,
    pub signed_discrepancy: bool,
    /// Apply distillation during the mining warm-up as well.
    pub during_warmup: bool,
}

impl Default for MadConfig {
    fn default() -> Self {
        Self {
            mode: MadMode::Mad,
            alpha: 1.0,
            signed_discrepancy: false,
            during_warmup: true,
        }
    }
}

impl MadConfig {
    pub fn discrepancy(&self) -> Discrepancy {
        Discrepancy::from_signed_flag(self.signed_discrepancy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarConfig {
    pub mode: MarMode,
    pub beta: f64,
    pub warmup_epochs: usize,
    pub subsample_size: usize,
    pub literal_softmax_counts: bool,
}

impl Default for MarConfig {
    fn default() -> Self {
        Self {
            mode: MarMode::Mar,
            beta: 0.5,
            warmup_epochs: 5,
            subsample_size: 512,
            literal_softmax_counts: false,
        }
    }
}

impl MarConfig {
    pub fn normalization(&self) -> HistogramNormalization {
        if self.literal_softmax_counts {
            HistogramNormalization::SoftmaxOfCounts
        } else {
            HistogramNormalization::Smoothed
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub optim: OptimizerConfig,
    #[serde(default)]
    pub mad: MadConfig,
    #[serde(default)]
    pub mar: MarConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl TrainConfig {
    /// Desk-scale defaults around `dataset`.
    pub fn new(dataset: DatasetSpec) -> Self {
        Self {
            seed: 0,
            dataset,
            model: ModelConfig::default(),
            teacher: TeacherConfig::default(),
            train: TrainSection::default(),
            optim: OptimizerConfig::default(),
            mad: MadConfig::default(),
            mar: MarConfig::default(),
            output: OutputConfig::default(),
        }
    }

    /// The full-scale classification schedule: SGD for 100 epochs, batch 64,
    /// lr 1e-3 with 5 epochs of linear warm-up, divided by 10 after epochs
    /// 16, 33 and 50, weight decay 5e-4, momentum 0.9, (alpha, beta) =
    /// (30, 0.5) and 5 mining warm-up epochs.
    pub fn reference_schedule(dataset: DatasetSpec) -> Self {
        let optim = OptimizerConfig {
            method: OptimMethod::Sgd,
            learning_rate: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_warmup_epochs: 5,
            milestones: vec![16, 33, 50],
            gamma: 0.1,
        };
        let mut cfg = Self::new(dataset);
        cfg.train.epochs = 100;
        cfg.train.batch_size = 64;
        cfg.teacher = TeacherConfig {
            epochs: 100,
            batch_size: 64,
            optim: optim.clone(),
        };
        cfg.optim = optim;
        cfg.mad.alpha = 30.0;
        cfg.mar.beta = 0.5;
        cfg.mar.warmup_epochs = 5;
        cfg
    }

    /// Named presets: `desk` and `reference`.
    pub fn preset(name: &str, dataset: DatasetSpec) -> Result<Self> {
        match name {
            "desk" => Ok(Self::new(dataset)),
            "reference" => Ok(Self::reference_schedule(dataset)),
            other => Err(Error::config("preset", format!("unknown preset {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.train.dropout.validate()?;
        self.optim.validate("optim")?;
        self.teacher.optim.validate("teacher.optim")?;
        if self.train.batch_size < 2 {
            return Err(Error::config("train.batch_size", "must be at least 2"));
        }
        if self.teacher.batch_size < 1 {
            return Err(Error::config("teacher.batch_size", "must be at least 1"));
        }
        if self.teacher.epochs < 1 {
            return Err(Error::config("teacher.epochs", "must be at least 1"));
        }
        if self.mar.warmup_epochs < 1 {
            return Err(Error::config("mar.warmup_epochs", "must be at least 1"));
        }
        if self.train.epochs <= self.mar.warmup_epochs {
            return Err(Error::config(
                "train.epochs",
                format!(
                    "must exceed mar.warmup_epochs ({}), got {}",
                    self.mar.warmup_epochs, self.train.epochs
                ),
            ));
        }
        if self.mar.subsample_size < 1 {
            return Err(Error::config("mar.subsample_size", "must be at least 1"));
        }
        for (field, v) in [("mad.alpha", self.mad.alpha), ("mar.beta", self.mar.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(
                    field,
                    format!("must be finite and nonnegative, got {v}"),
                ));
            }
        }
        for (field, v) in [
            ("model.hidden_width", self.model.hidden_width),
            ("model.feature_width", self.model.feature_width),
            ("model.fused_width", self.model.fused_width),
            (
                "model.teacher_fused_width",
                self.model.teacher_fused_width.unwrap_or(1),
            ),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig =
            toml::from_str(text).map_err(|e| Error::config("config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    fn architecture(&self, fused_width: usize) -> Architecture {
        Architecture {
            input_dims: vec![self.dataset.feature_dim; self.dataset.num_modalities],
            hidden_width: self.model.hidden_width,
            feature_width: self.model.feature_width,
            fused_width,
            num_classes: self.dataset.num_classes,
        }
    }

    pub fn teacher_architecture(&self) -> Architecture {
        self.architecture(
            self.model
                .teacher_fused_width
                .unwrap_or(self.model.fused_width),
        )
    }

    pub fn deployment_architecture(&self) -> Architecture {
        self.architecture(self.model.fused_width)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3

[dataset]
num_modalities = 3
num_classes = 2
samples_per_class = 100
feature_dim = 4
snr = [0.5, 2.0, 0.5]
seed = 7
"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let cfg = TrainConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.mad.alpha, 1.0);
        assert_eq!(cfg.mar.beta, 0.5);
        assert_eq!(cfg.mar.warmup_epochs, 5);
        assert_eq!(cfg.mad.mode, MadMode::Mad);
        assert_eq!(cfg.train.epochs, 60);
        assert_eq!(cfg.optim.learning_rate, 3e-3);
    }

    #[test]
    fn all_documented_keys_parse() {
        let text = format!(
            "{MINIMAL}
[mad]
mode = \"sp\"
alpha = 4.0
signed_discrepancy = true

[mar]
mode = \"sr\"
beta = 0.2
warmup_epochs = 10
subsample_size = 128
literal_softmax_counts = true

[train]
epochs = 20
batch_size = 16
dropout = {{ kind = \"bernoulli\", keep_prob = 0.6 }}

[optim]
method = \"adam\"
milestones = [5, 10]
"
        );
        let cfg = TrainConfig::from_toml(&text).unwrap();
        assert_eq!(cfg.mad.mode, MadMode::Sp);
        assert_eq!(cfg.mad.discrepancy(), Discrepancy::Signed);
        assert_eq!(cfg.mar.mode, MarMode::Sr);
        assert_eq!(
            cfg.mar.normalization(),
            HistogramNormalization::SoftmaxOfCounts
        );
        assert_eq!(
            cfg.train.dropout,
            DropoutPolicy::Bernoulli { keep_prob: 0.6 }
        );
        assert_eq!(cfg.optim.method, OptimMethod::Adam);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for extra in [
            "[mad]\ngamma = 1.0\n",
            "bogus = 1\n",
            "[mar]\nbeta = 0.5\nwarmup = 3\n",
        ] {
            let err = TrainConfig::from_toml(&format!("{MINIMAL}\n{extra}")).unwrap_err();
            assert!(matches!(err, Error::Config { .. }), "{err}");
        }
    }

    #[test]
    fn invariants_are_enforced() {
        let bad = format!("{MINIMAL}\n[train]\nepochs = 5\n");
        assert!(TrainConfig::from_toml(&bad)
            .unwrap_err()
            .to_string()
            .contains("train.epochs"));
        let bad = format!("{MINIMAL}\n[train]\nbatch_size = 1\n");
        assert!(TrainConfig::from_toml(&bad).is_err());
        let bad = format!("{MINIMAL}\n[mad]\nalpha = -1.0\n");
        assert!(TrainConfig::from_toml(&bad)
            .unwrap_err()
            .to_string()
            .contains("mad.alpha"));
        let bad = format!("{MINIMAL}\n[mar]\nmode = \"weird\"\n");
        assert!(TrainConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn presets_round_trip_through_toml() {
        let cfg = TrainConfig::from_toml(MINIMAL).unwrap();
        let reference = TrainConfig::preset("reference", cfg.dataset.clone()).unwrap();
        assert_eq!(reference.optim.milestones, vec![16, 33, 50]);
        assert!((reference.optim.lr_at(1) - 2e-4).abs() < 1e-18);
        let back = TrainConfig::from_toml(&reference.to_toml()).unwrap();
        assert_eq!(back, reference);
        assert!(TrainConfig::preset("nope", cfg.dataset).is_err());
    }
}

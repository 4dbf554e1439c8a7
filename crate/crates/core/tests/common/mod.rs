#![allow(dead_code)]

use mmanet::{DatasetSpec, TrainConfig};

/// Three modalities, two classes; modality `strong` carries five times the
/// class signal of the other two.
pub fn planted_spec(seed: u64, strong: usize) -> DatasetSpec {
    let mut snr = vec![0.5; 3];
    snr[strong] = 2.5;
    DatasetSpec {
        num_modalities: 3,
        num_classes: 2,
        samples_per_class: 300,
        feature_dim: 8,
        snr,
        seed,
        test_fraction: 0.3,
        modality_names: None,
    }
}

pub fn planted_config(seed: u64, strong: usize) -> TrainConfig {
    let mut cfg = TrainConfig::new(planted_spec(seed, strong));
    cfg.seed = seed;
    cfg
}

/// A small, fast configuration for plumbing tests.
pub fn tiny_config(seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(DatasetSpec {
        num_modalities: 3,
        num_classes: 2,
        samples_per_class: 60,
        feature_dim: 4,
        snr: vec![0.5, 2.0, 0.5],
        seed,
        test_fraction: 0.25,
        modality_names: None,
    });
    cfg.seed = seed;
    cfg.teacher.epochs = 5;
    cfg.train.epochs = 8;
    cfg.mar.warmup_epochs = 3;
    cfg.train.batch_size = 16;
    cfg.model.hidden_width = 8;
    cfg.model.feature_width = 4;
    cfg.model.fused_width = 8;
    cfg
}

pub fn verdict(name: &str, pass: bool, detail: impl std::fmt::Display) {
    println!("[{}] {name}: {detail}", if pass { "PASS" } else { "FAIL" });
}

//! Incomplete multimodal learning with a complete-modality teacher.
//!
//! A teacher network is trained on all modalities. A deployment network
//! of the same shape is then trained under random modality dropout with two
//! auxiliary terms: a relation distillation loss weighted by teacher
//! uncertainty ([`mad`]) and a regularization head trained only on the
//! combinations that lack the mined strong modality ([`mar`]).
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for the common cases.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod mad;
pub mod mar;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod train;

pub use config::TrainConfig;
pub use data::{generate_dataset, DatasetSpec, DropoutPattern, DropoutPolicy};
pub use error::{Error, Result};
pub use eval::{acer, evaluate_combinations, BinaryErrorBreakdown, CombinationReport};
pub use mad::{mad_loss, MadMode};
pub use mar::{MarMode, MiningReport, MiningState};
pub use model::{Architecture, Checkpoint, FusedFeature, MultimodalNet, NetRole};
pub use scalar::Scalar;
pub use train::{pretrain_teacher, total_loss, train_deployment, DeploymentRun, TrainLog};

pub type Dataset = data::Dataset<f64>;
pub type Dataset32 = data::Dataset<f32>;
pub type ModalityBatch = data::ModalityBatch<f64>;
pub type ModalityBatch32 = data::ModalityBatch<f32>;
pub type Network = MultimodalNet<f64>;
pub type Network32 = MultimodalNet<f32>;

//! Teacher pretraining and the deployment training loop.
//!
//! Deployment epochs `1..=N` are the mining warm-up: the regularization loss
//! is held at zero and, after each epoch, the prediction-distribution
//! divergences are pushed into the memory bank. Mining freezes at the end of
//! epoch `N`; from epoch `N + 1` the regularization head is trained on the
//! mined weak combinations.

use std::io::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{enumerate_patterns, sample_dropout_pattern, Dataset, ModalityBatch};
use crate::error::{ensure_finite, Error, Result};
use crate::loss::cross_entropy;
use crate::mad::{mad_loss, MadMode};
use crate::mar::{
    class_histogram, collect_pattern_predictions, mar_loss, pattern_divergence,
    single_modality_mask, MarMode, MiningReport, MiningState,
};
use crate::model::{MultimodalNet, NetRole};
use crate::optim::Optimizer;
use crate::scalar::Scalar;

// independent ChaCha streams derived from the run seed
const STREAM_TEACHER_INIT: u64 = 1;
const STREAM_TEACHER_BATCHES: u64 = 2;
const STREAM_DEPLOY_INIT: u64 = 3;
const STREAM_DEPLOY_BATCHES: u64 = 4;
const STREAM_MINING_SUBSET: u64 = 5;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// `L_TL + alpha * L_MAD + beta * L_MAR`, failing on a non-finite component.
pub fn total_loss(task: f64, mad: f64, mar: f64, alpha: f64, beta: f64) -> Result<f64> {
    ensure_finite("task loss", task)?;
    ensure_finite("distillation loss", mad)?;
    ensure_finite("regularization loss", mar)?;
    let total = task + alpha * mad + beta * mar;
    ensure_finite("total loss", total)?;
    Ok(total)
}

/// Shuffled index chunks; a trailing chunk smaller than `min_batch` is dropped.
pub fn epoch_batches(
    n: usize,
    batch_size: usize,
    min_batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= min_batch)
        .map(<[usize]>::to_vec)
        .collect()
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub task_loss: f64,
    pub mad_loss: f64,
    pub mar_loss: f64,
    pub total_loss: f64,
    /// Fraction of training samples that received regularization this epoch.
    pub regularized_fraction: f64,
    /// Divergence vector recorded into the memory bank (warm-up epochs only).
    pub mining_divergence: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str, path: &Path) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                serde_json::from_str(l).map_err(|e| Error::Format {
                    kind: "train log",
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, path)
    }
}

#[derive(Default)]
struct EpochAccumulator {
    task: f64,
    mad: f64,
    mar: f64,
    total: f64,
    batches: usize,
    regularized: usize,
    samples: usize,
}

impl EpochAccumulator {
    fn finish(self, epoch: usize, lr: f64, mining: Option<Vec<f64>>) -> EpochRecord {
        let n = self.batches.max(1) as f64;
        EpochRecord {
            epoch,
            learning_rate: lr,
            task_loss: self.task / n,
            mad_loss: self.mad / n,
            mar_loss: self.mar / n,
            total_loss: self.total / n,
            regularized_fraction: self.regularized as f64 / self.samples.max(1) as f64,
            mining_divergence: mining,
        }
    }
}

/// Trains the complete-modality teacher with cross-entropy only.
pub fn pretrain_teacher<T: Scalar>(
    config: &TrainConfig,
    data: &Dataset<T>,
) -> Result<(MultimodalNet<T>, TrainLog)> {
    config.validate()?;
    let mut init_rng = stream(config.seed, STREAM_TEACHER_INIT);
    let mut batch_rng = stream(config.seed, STREAM_TEACHER_BATCHES);
    let mut net = MultimodalNet::init(
        NetRole::Teacher,
        config.teacher_architecture(),
        &mut init_rng,
    )?;
    let mut opt = Optimizer::new(config.teacher.optim.clone());
    let mut log = TrainLog::default();
    for epoch in 1..=config.teacher.epochs {
        let lr = config.teacher.optim.lr_at(epoch);
        let mut acc = EpochAccumulator::default();
        for idx in epoch_batches(
            data.train.len(),
            config.teacher.batch_size,
            1,
            &mut batch_rng,
        ) {
            let batch = data.train.select(&idx);
            let pass = net.forward(&batch)?;
            let (loss, grad) = cross_entropy(&pass.logits, batch.labels())?;
            let loss = loss.to_f64_lossless();
            let total = total_loss(loss, 0.0, 0.0, 0.0, 0.0)?;
            let grads = net.backward(&pass, None, &grad, None)?;
            opt.step(net.params_mut(), &grads, lr)?;
            acc.task += loss;
            acc.total += total;
            acc.batches += 1;
            acc.samples += idx.len();
        }
        log.records.push(acc.finish(epoch, lr, None));
    }
    Ok((net, log))
}

/// Everything a deployment run produces.
#[derive(Debug, Clone)]
pub struct DeploymentRun<T> {
    pub net: MultimodalNet<T>,
    pub log: TrainLog,
    pub mining: MiningState,
    pub mining_report: MiningReport,
}

pub fn train_deployment<T: Scalar>(
    config: &TrainConfig,
    data: &Dataset<T>,
    teacher: &MultimodalNet<T>,
) -> Result<DeploymentRun<T>> {
    config.validate()?;
    if teacher.role() != NetRole::Teacher {
        return Err(Error::Contract(
            "train_deployment needs a teacher network".into(),
        ));
    }
    if *teacher.architecture() != config.teacher_architecture() {
        return Err(Error::Contract(
            "teacher checkpoint architecture does not match the configuration".into(),
        ));
    }
    let m = config.dataset.num_modalities;
    let warmup = config.mar.warmup_epochs;
    let alpha = config.mad.alpha;
    let beta = config.mar.beta;
    let mining_patterns = enumerate_patterns(m)?.mining;

    let mut init_rng = stream(config.seed, STREAM_DEPLOY_INIT);
    let mut batch_rng = stream(config.seed, STREAM_DEPLOY_BATCHES);
    let mut subset_rng = stream(config.seed, STREAM_MINING_SUBSET);

    let mut net = MultimodalNet::init(
        NetRole::Deployment,
        config.deployment_architecture(),
        &mut init_rng,
    )?;
    let mut opt = Optimizer::new(config.optim.clone());
    let mut mining = MiningState::new(warmup, m)?;

    let n_train = data.train.len();
    let subset_size = config.mar.subsample_size.min(n_train);
    let all: Vec<usize> = (0..n_train).collect();
    let mut subset_idx: Vec<usize> = all
        .choose_multiple(&mut subset_rng, subset_size)
        .copied()
        .collect();
    subset_idx.sort_unstable();
    let eval_subset = data.train.select(&subset_idx);

    let mut log = TrainLog::default();
    for epoch in 1..=config.train.epochs {
        let lr = config.optim.lr_at(epoch);
        let in_warmup = epoch <= warmup;
        let mad_active =
            config.mad.mode != MadMode::Off && (config.mad.during_warmup || !in_warmup);
        let mar_active = config.mar.mode != MarMode::Off && !in_warmup;
        if mar_active && config.mar.mode == MarMode::Mar && !mining.frozen {
            return Err(Error::Contract(format!(
                "regularization requested at epoch {epoch} before mining froze"
            )));
        }

        let mut acc = EpochAccumulator::default();
        for idx in epoch_batches(n_train, config.train.batch_size, 2, &mut batch_rng) {
            let complete = data.train.select(&idx);
            let patterns = (0..idx.len())
                .map(|_| sample_dropout_pattern(m, &mut batch_rng, config.train.dropout))
                .collect();
            let dropped = complete.with_patterns(patterns)?;
            step_deployment(
                config, teacher, &mut net, &mut opt, &complete, &dropped, &mining, mad_active,
                mar_active, alpha, beta, lr, &mut acc,
            )?;
        }

        let divergence = if in_warmup {
            let predictions = collect_pattern_predictions(&net, &eval_subset, &mining_patterns)?;
            let hist = class_histogram(&predictions, config.mar.normalization());
            let g = pattern_divergence(&hist).to_vec();
            mining.update(&g, epoch)?;
            if epoch == warmup {
                mining.finalize()?;
                log::info!(
                    "mining froze after epoch {epoch}: mean divergence {:?}, strong modality {:?}",
                    mining.mean_divergence,
                    mining.strong_modality
                );
            }
            Some(g)
        } else {
            None
        };
        let record = acc.finish(epoch, lr, divergence);
        log::debug!(
            "epoch {epoch}: total {:.5} (task {:.5}, mad {:.5}, mar {:.5})",
            record.total_loss,
            record.task_loss,
            record.mad_loss,
            record.mar_loss
        );
        log.records.push(record);
    }

    let mining_report = MiningReport::from_state(&mining, &config.dataset.modality_names())?;
    Ok(DeploymentRun {
        net,
        log,
        mining,
        mining_report,
    })
}

#[allow(clippy::too_many_arguments)]
fn step_deployment<T: Scalar>(
    config: &TrainConfig,
    teacher: &MultimodalNet<T>,
    net: &mut MultimodalNet<T>,
    opt: &mut Optimizer<T>,
    complete: &ModalityBatch<T>,
    dropped: &ModalityBatch<T>,
    mining: &MiningState,
    mad_active: bool,
    mar_active: bool,
    alpha: f64,
    beta: f64,
    lr: f64,
    acc: &mut EpochAccumulator,
) -> Result<()> {
    if complete.labels() != dropped.labels() {
        return Err(Error::Contract(
            "teacher and deployment batches are misaligned".into(),
        ));
    }
    let labels = dropped.labels();
    let pass = net.forward(dropped)?;
    let (task, grad_logits) = cross_entropy(&pass.logits, labels)?;

    let (mad_value, grad_fused) = if mad_active {
        let (z_t, y_t) = teacher.forward_teacher(complete)?;
        let out = mad_loss(
            &z_t,
            &pass.fused_feature(),
            &y_t,
            config.mad.mode,
            config.mad.discrepancy(),
        )?;
        let grad = out
            .grad
            .into_dimensionality::<ndarray::Ix2>()
            .map_err(|e| Error::shape("distillation gradient", "b x c", e))?;
        (out.loss.to_f64_lossless(), Some(grad * T::of(alpha)))
    } else {
        (0.0, None)
    };

    let reg_logits = pass.reg_logits.as_ref().expect("deployment head");
    let (mar_value, grad_reg, selected) = if mar_active {
        let mask = match config.mar.mode {
            MarMode::Mar => mining.weak_mask(dropped.patterns())?,
            MarMode::Sr => single_modality_mask(dropped.patterns()),
            MarMode::Off => unreachable!(),
        };
        let selected = mask.iter().filter(|&&s| s).count();
        let (loss, grad) = mar_loss(reg_logits, labels, &mask)?;
        (loss.to_f64_lossless(), grad * T::of(beta), selected)
    } else {
        (0.0, Array2::zeros(reg_logits.raw_dim()), 0)
    };

    let task = task.to_f64_lossless();
    let total = total_loss(task, mad_value, mar_value, alpha, beta)?;
    let grads = net.backward(&pass, grad_fused.as_ref(), &grad_logits, Some(&grad_reg))?;
    ensure_finite("gradient", grads.max_abs().to_f64_lossless())?;
    opt.step(net.params_mut(), &grads, lr)?;

    acc.task += task;
    acc.mad += mad_value;
    acc.mar += mar_value;
    acc.total += total;
    acc.batches += 1;
    acc.regularized += selected;
    acc.samples += labels.len();
    Ok(())
}

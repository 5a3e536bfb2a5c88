//! The training loop.
//!
//! Every random stream is a pure function of a configured seed and the
//! global epoch (and batch index), so a run restored from an epoch-boundary
//! checkpoint continues bit-exactly.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::{batch_rng, build_batch, AugmentError};
use crate::config::{BankUpdate, DatasetKind, TrainConfig};
use crate::data::{load_cifar10, make_synthetic_split, DataError, Dataset, ImageSet, LabelSet};
use crate::encoder::{Encoder, EncoderError};
use crate::evaluate::{knn_classify, EvalConfig, EvalError};
use crate::losses::{total_loss, LossError};
use crate::membank::{bank_drift, BankError, GroupTable, MemoryBank};
use crate::mining::MiningError;
use crate::metrics::{MetricsError, MetricsRow, MetricsSink};
use crate::numkernel::{sgd_step, Graph, KernelError, Sgd, Tensor};
use crate::real::Real;

/// Salt separating the epoch-shuffle stream from the augmentation streams.
const SHUFFLE_SALT: u64 = 0x5348_5546_464c_4521;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error("non-finite loss (ce {ce}, cons {cons}) at epoch {epoch}, batch {batch}; instances {instances:?}")]
    NonFinite {
        epoch: usize,
        batch: usize,
        ce: f64,
        cons: f64,
        instances: Vec<usize>,
    },
    #[error("dataset has {images} images but the state was built for {bank}")]
    SizeMismatch { images: usize, bank: usize },
    #[error("no held-out set configured")]
    MissingTestSet,
}

/// How the current training phase was entered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageMode {
    /// Continue from the pre-merge state.
    Resume,
    /// Reinitialize encoder and bank, keep only the groups.
    Scratch,
}

/// Position inside the base run (stage 0) or a post-merge stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Phase {
    pub stage: usize,
    pub mode: Option<StageMode>,
    /// Epochs completed within this phase.
    pub epoch: usize,
}

impl Phase {
    pub const BASE: Phase = Phase {
        stage: 0,
        mode: None,
        epoch: 0,
    };
}

/// Step-decay learning-rate schedule for one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct Schedule {
    pub epochs: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_epochs: Vec<usize>,
}

impl Schedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.decay.powi(drops as i32)
    }

    /// The schedule governing `phase`. A resumed stage restarts at the stage
    /// learning rate with the base decay epochs scaled to the stage length.
    pub fn for_phase(cfg: &TrainConfig, phase: &Phase) -> Self {
        match phase.mode {
            Some(StageMode::Resume) => {
                let epochs = cfg.merge_stage_epochs;
                let mut decay_epochs: Vec<usize> = cfg
                    .lr_decay_epochs
                    .iter()
                    .map(|&e| e * epochs / cfg.epochs.max(1))
                    .filter(|&e| e >= 1 && e < epochs)
                    .collect();
                decay_epochs.dedup();
                Self {
                    epochs,
                    lr: cfg.merge_stage_lr.unwrap_or(cfg.lr),
                    decay: cfg.lr_decay,
                    decay_epochs,
                }
            }
            _ => Self {
                epochs: cfg.epochs,
                lr: cfg.lr,
                decay: cfg.lr_decay,
                decay_epochs: cfg.lr_decay_epochs.clone(),
            },
        }
    }
}

/// Everything that evolves during training.
#[derive(Clone, Debug)]
pub struct TrainState<T: Real> {
    pub encoder: Encoder<T>,
    pub velocity: Vec<Tensor<T>>,
    pub bank: MemoryBank<T>,
    pub groups: GroupTable,
    /// Global epochs completed, across phases.
    pub epoch: usize,
    pub phase: Phase,
}

impl<T: Real> TrainState<T> {
    /// Freshly initialized state for `n` instances.
    pub fn init(cfg: &TrainConfig, n: usize) -> Result<Self, TrainError> {
        let encoder = Encoder::init(cfg.encoder_spec(), cfg.seed_model)?;
        let velocity = encoder.params().zeros_like();
        let bank = MemoryBank::random(n, cfg.embed_dim, cfg.bank_momentum, cfg.seed_bank)?;
        Ok(Self {
            encoder,
            velocity,
            bank,
            groups: GroupTable::identity(n),
            epoch: 0,
            phase: Phase::BASE,
        })
    }

    /// Reinitializes encoder, velocities and bank with the configured seeds,
    /// keeping the group table; members alias their root's fresh row.
    pub fn reinitialize(&mut self, cfg: &TrainConfig) -> Result<(), TrainError> {
        let fresh = Self::init(cfg, self.bank.n())?;
        self.encoder = fresh.encoder;
        self.velocity = fresh.velocity;
        self.bank = fresh.bank;
        self.bank.sync_all(&self.groups);
        Ok(())
    }

    pub fn remaining_epochs(&self, cfg: &TrainConfig) -> usize {
        Schedule::for_phase(cfg, &self.phase).epochs.saturating_sub(self.phase.epoch)
    }
}

/// Labels and held-out data for periodic kNN evaluation. Only evaluation
/// code reads the labels.
pub struct Monitor<'a> {
    pub train_labels: &'a LabelSet,
    pub test: &'a Dataset,
}

/// Weighted-kNN accuracy with memory-bank rows as the reference set and
/// plain (unaugmented) embeddings of the held-out images as queries.
pub fn bank_knn_accuracy<T: Real>(
    encoder: &Encoder<T>,
    bank: &MemoryBank<T>,
    monitor: &Monitor<'_>,
    cfg: &EvalConfig,
) -> Result<f64, TrainError> {
    let queries = embed_all(encoder, &monitor.test.images)?;
    let k = cfg.knn_k.min(bank.n());
    let result = knn_classify(
        bank.rows(),
        monitor.train_labels.labels(),
        queries.data(),
        bank.dim(),
        k,
        cfg.knn_temperature,
    )?;
    Ok(result.accuracy(monitor.test.labels.labels()))
}

/// Plain embeddings of every image in the set.
pub fn embed_all<T: Real>(encoder: &Encoder<T>, images: &ImageSet) -> Result<Tensor<T>, TrainError> {
    let all: Vec<usize> = (0..images.len()).collect();
    Ok(encoder.embed_chunked(&images.tensor(&all), 128)?)
}

#[derive(Default)]
struct EpochTotals {
    batches: usize,
    ce: f64,
    cons: f64,
    total: f64,
    positive: f64,
    entropy: f64,
}

fn shuffled(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut batch_rng(seed ^ SHUFFLE_SALT, epoch, 0));
    order
}

/// One optimization step on `instances`; returns the loss report.
fn step<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    images: &ImageSet,
    instances: &[usize],
    views: usize,
    batch_index: usize,
    hyper: Sgd,
) -> Result<crate::losses::LossReport, TrainError> {
    let policy = cfg.augment_policy();
    let mut rng = batch_rng(cfg.seed_augment, state.epoch, batch_index);
    let batch = build_batch(images, instances, views, &state.groups, &policy, &mut rng)?;
    let mut g = Graph::new();
    let (feats, ids) = state.encoder.record(&mut g, &batch.tensor())?;
    let (loss, report) = total_loss(
        &mut g,
        feats,
        instances,
        views,
        &state.groups,
        &state.bank,
        &cfg.loss_config(),
    )?;
    if !report.total.is_finite() {
        return Err(TrainError::NonFinite {
            epoch: state.epoch,
            batch: batch_index,
            ce: report.ce,
            cons: report.cons,
            instances: instances.to_vec(),
        });
    }
    let fvals = g.value(feats).clone();
    let grads = g.backward(loss)?.collect(&ids)?;
    sgd_step(state.encoder.params_mut(), &grads, &mut state.velocity, hyper)?;

    let dim = state.bank.dim();
    for (b, &i) in instances.iter().enumerate() {
        let rows = &fvals.data()[b * views * dim..(b + 1) * views * dim];
        let used = match cfg.bank_update {
            BankUpdate::All => rows,
            BankUpdate::Single => &rows[..dim],
        };
        state.bank.update_group(&state.groups, i, used)?;
    }
    Ok(report)
}

/// Runs up to `max_epochs` epochs of the current phase and records one
/// metrics row per epoch. Returns the number of epochs run.
pub fn run_epochs<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    images: &ImageSet,
    monitor: Option<&Monitor<'_>>,
    sink: &mut dyn MetricsSink,
    max_epochs: usize,
) -> Result<usize, TrainError> {
    if images.len() != state.bank.n() {
        return Err(TrainError::SizeMismatch {
            images: images.len(),
            bank: state.bank.n(),
        });
    }
    let schedule = Schedule::for_phase(cfg, &state.phase);
    let epochs = state.remaining_epochs(cfg).min(max_epochs);
    let (per_batch, views) = cfg.batch_shape();
    let eval_cfg = cfg.eval_config();
    for _ in 0..epochs {
        let lr = schedule.lr_at(state.phase.epoch);
        let hyper = Sgd {
            lr,
            ..cfg.sgd(0)
        };
        let before = state.bank.snapshot();
        let cancelled_before = state.bank.cancelled_updates();
        let mut totals = EpochTotals::default();
        let order = shuffled(images.len(), cfg.seed_augment, state.epoch);
        for (b, chunk) in order.chunks(per_batch).enumerate() {
            let report = step(state, cfg, images, chunk, views, b, hyper)?;
            totals.batches += 1;
            totals.ce += report.ce;
            totals.cons += report.cons;
            totals.total += report.total;
            totals.positive += report.mean_positive_logit;
            totals.entropy += report.mean_entropy;
        }
        let drift = bank_drift(&before, &state.bank)?;
        state.epoch += 1;
        state.phase.epoch += 1;
        let due = cfg.eval_every > 0
            && (state.phase.epoch % cfg.eval_every == 0 || state.phase.epoch == schedule.epochs);
        let knn = match monitor {
            Some(m) if due => Some(bank_knn_accuracy(&state.encoder, &state.bank, m, &eval_cfg)?),
            _ => None,
        };
        let nb = totals.batches.max(1) as f64;
        sink.record(&MetricsRow {
            stage: Some(state.phase.stage),
            epoch: Some(state.epoch),
            lr: Some(lr),
            ce: Some(totals.ce / nb),
            cons: Some(totals.cons / nb),
            total: Some(totals.total / nb),
            mean_positive_logit: Some(totals.positive / nb),
            mean_entropy: Some(totals.entropy / nb),
            bank_drift: Some(drift),
            cancelled_updates: Some(state.bank.cancelled_updates() - cancelled_before),
            knn_accuracy: knn,
            groups: Some(state.groups.group_count()),
            grouped_fraction: Some(state.groups.grouped_count() as f64 / state.groups.len() as f64),
            ..MetricsRow::event("epoch")
        })?;
    }
    Ok(epochs)
}

/// Runs the current phase to completion.
pub fn train<T: Real>(
    state: &mut TrainState<T>,
    cfg: &TrainConfig,
    images: &ImageSet,
    monitor: Option<&Monitor<'_>>,
    sink: &mut dyn MetricsSink,
) -> Result<usize, TrainError> {
    run_epochs(state, cfg, images, monitor, sink, usize::MAX)
}

/// Training set and optional held-out set described by the config.
pub fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Option<Dataset>), TrainError> {
    match cfg.dataset {
        DatasetKind::Synthetic => {
            let (train, test) = make_synthetic_split(&cfg.synthetic_spec(), cfg.synthetic_test_per_class);
            Ok((train, Some(test)))
        }
        DatasetKind::Cifar10 => {
            let path = cfg.train_path.as_ref().expect("validated config has train_path");
            let train = load_cifar10(path, cfg.subset, cfg.seed_data)?;
            let test = match &cfg.test_path {
                Some(p) => Some(load_cifar10(p, cfg.test_subset, cfg.seed_data ^ 1)?),
                None => None,
            };
            Ok((train, test))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::Layer;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            synthetic_classes: 2,
            synthetic_per_class: 6,
            synthetic_test_per_class: 2,
            synthetic_size: 6,
            encoder_layers: Some(vec![Layer::Flatten]),
            embed_dim: 8,
            k: 2,
            batch_size: 4,
            epochs: 2,
            eval_every: 1,
            eval_knn_k: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leave_state_at_init() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_cfg()
        };
        let (data, _) = load_data(&cfg).unwrap();
        let mut state = TrainState::<f64>::init(&cfg, data.len()).unwrap();
        let init = state.clone();
        let mut rows = Vec::new();
        assert_eq!(train(&mut state, &cfg, &data.images, None, &mut rows).unwrap(), 0);
        assert!(rows.is_empty());
        assert_eq!(state.bank, init.bank);
        assert_eq!(state.encoder.params(), init.encoder.params());
    }

    #[test]
    fn training_keeps_invariants_and_skips_labels() {
        let cfg = tiny_cfg();
        let (data, test) = load_data(&cfg).unwrap();
        let mut state = TrainState::<f64>::init(&cfg, data.len()).unwrap();
        let mut rows = Vec::new();
        train(&mut state, &cfg, &data.images, None, &mut rows).unwrap();
        assert_eq!(data.labels.read_count(), 0);
        assert_eq!(rows.len(), 2);
        assert!(state.bank.max_norm_deviation() < 1e-6);
        let test = test.unwrap();
        let monitor = Monitor {
            train_labels: &data.labels,
            test: &test,
        };
        let acc = bank_knn_accuracy(&state.encoder, &state.bank, &monitor, &cfg.eval_config()).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }

    #[test]
    fn resume_schedule_scales_decay_epochs() {
        let cfg = TrainConfig {
            epochs: 30,
            lr_decay_epochs: vec![8, 14, 20],
            merge_stage_epochs: 10,
            ..TrainConfig::default()
        };
        let phase = Phase {
            stage: 1,
            mode: Some(StageMode::Resume),
            epoch: 0,
        };
        let s = Schedule::for_phase(&cfg, &phase);
        assert_eq!(s.decay_epochs, vec![2, 4, 6]);
        assert_eq!(s.epochs, 10);
        assert_eq!(Schedule::for_phase(&cfg, &Phase::BASE).lr_at(14), cfg.lr_at(14));
    }
}

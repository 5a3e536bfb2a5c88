//! The flat JSON training configuration.
//!
//! Every scalar of a run lives in one document. Missing keys take the
//! defaults below; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augment::AugmentPolicy;
use crate::data::SyntheticSpec;
use crate::encoder::{EncoderSpec, Layer, CIFAR10_CHANNEL_MEAN};
use crate::evaluate::EvalConfig;
use crate::losses::{ConsistencyMode, ConsistencyReduction, LossConfig};
use crate::mining::MergeConfig;
use crate::numkernel::Sgd;
use crate::real::Precision;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("config schema violation: {0}")]
    Schema(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Cifar10,
    Synthetic,
}

/// How a batch reaches `batch_size · k` images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Expansion {
    /// `batch_size` instances, `k` views each.
    Multi,
    /// `batch_size · k` distinct instances, one view each.
    Standard,
}

/// Which features feed the memory update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BankUpdate {
    /// Mean over all `k` views.
    All,
    /// The first view only.
    Single,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub dataset: DatasetKind,
    /// CIFAR-10 training batch file or directory of `data_batch_*.bin`.
    pub train_path: Option<PathBuf>,
    /// CIFAR-10 held-out batch file.
    pub test_path: Option<PathBuf>,
    pub subset: Option<usize>,
    pub test_subset: Option<usize>,

    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_test_per_class: usize,
    pub synthetic_size: usize,
    pub synthetic_separation: f64,
    pub synthetic_noise: f64,
    pub synthetic_max_shift: usize,
    pub synthetic_distractor: f64,
    pub synthetic_nuisance: f64,
    pub synthetic_duplicate_fraction: f64,

    /// Trunk layers; `None` selects the two-block conv default.
    pub encoder_layers: Option<Vec<Layer>>,
    pub embed_dim: usize,
    pub channel_mean: Option<Vec<f64>>,
    pub precision: Precision,

    pub k: usize,
    pub batch_size: usize,
    pub expansion: Expansion,
    pub bank_update: BankUpdate,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub temperature: f64,
    pub bank_momentum: f64,
    pub consistency: ConsistencyMode,
    pub beta: f64,
    pub consistency_reduction: ConsistencyReduction,

    pub augment_crop_scale: (f64, f64),
    pub augment_flip_prob: f64,
    pub augment_grayscale_prob: f64,
    pub augment_brightness: f64,
    pub augment_contrast: f64,
    pub augment_saturation: f64,
    pub augment_jitter_prob: f64,

    pub merge_sigma: Option<f64>,
    pub merge_target_fraction: (f64, f64),
    pub merge_neighbors: usize,
    pub merge_stages: usize,
    pub merge_safety_cap: f64,
    /// Training epochs after each merge stage in resume mode.
    pub merge_stage_epochs: usize,
    /// Restart learning rate of a resumed stage; `None` reuses `lr`.
    pub merge_stage_lr: Option<f64>,

    pub eval_knn_k: usize,
    pub eval_knn_temperature: f64,
    /// Held-out kNN accuracy every this many epochs; 0 disables.
    pub eval_every: usize,
    pub eval_linear_epochs: usize,
    pub eval_linear_lr: f64,
    pub eval_retrieval_ks: Vec<usize>,

    pub seed_model: u64,
    pub seed_augment: u64,
    pub seed_bank: u64,
    pub seed_data: u64,

    pub metrics_path: Option<PathBuf>,
    /// Directory for per-epoch checkpoints; `None` disables writing them.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let policy = AugmentPolicy::default();
        let merge = MergeConfig::default();
        let eval = EvalConfig::default();
        Self {
            dataset: DatasetKind::Synthetic,
            train_path: None,
            test_path: None,
            subset: None,
            test_subset: None,
            synthetic_classes: 4,
            synthetic_per_class: 16,
            synthetic_test_per_class: 8,
            synthetic_size: 16,
            synthetic_separation: 1.0,
            synthetic_noise: 0.05,
            synthetic_max_shift: 2,
            synthetic_distractor: 0.3,
            synthetic_nuisance: 0.0,
            synthetic_duplicate_fraction: 0.0,
            encoder_layers: None,
            embed_dim: 64,
            channel_mean: None,
            precision: Precision::F32,
            k: 4,
            batch_size: 64,
            expansion: Expansion::Multi,
            bank_update: BankUpdate::All,
            epochs: 30,
            lr: 0.03,
            lr_decay: 0.1,
            lr_decay_epochs: vec![8, 14, 20],
            sgd_momentum: 0.9,
            weight_decay: 5e-4,
            temperature: 0.1,
            bank_momentum: 0.5,
            consistency: ConsistencyMode::None,
            beta: 1e5,
            consistency_reduction: ConsistencyReduction::Sum,
            augment_crop_scale: policy.crop_scale,
            augment_flip_prob: policy.flip_prob,
            augment_grayscale_prob: policy.grayscale_prob,
            augment_brightness: policy.brightness,
            augment_contrast: policy.contrast,
            augment_saturation: policy.saturation,
            augment_jitter_prob: policy.jitter_prob,
            merge_sigma: merge.sigma,
            merge_target_fraction: merge.target_fraction,
            merge_neighbors: merge.neighbors,
            merge_stages: merge.stages,
            merge_safety_cap: merge.safety_cap,
            merge_stage_epochs: 10,
            merge_stage_lr: None,
            eval_knn_k: eval.knn_k,
            eval_knn_temperature: eval.knn_temperature,
            eval_every: 5,
            eval_linear_epochs: eval.linear_epochs,
            eval_linear_lr: eval.linear_lr,
            eval_retrieval_ks: eval.retrieval_ks.clone(),
            seed_model: 0,
            seed_augment: 1,
            seed_bank: 2,
            seed_data: 3,
            metrics_path: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        if self.k == 0 || self.batch_size == 0 || self.embed_dim == 0 {
            return bad("k, batch_size and embed_dim must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.lr_decay > 0.0) {
            return bad(format!("lr {} / decay {}", self.lr, self.lr_decay));
        }
        if self.lr_decay_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("decay epochs {:?} not strictly increasing", self.lr_decay_epochs));
        }
        if !(0.0..1.0).contains(&self.sgd_momentum) || self.weight_decay < 0.0 {
            return bad("sgd momentum must be in [0, 1), weight decay ≥ 0".into());
        }
        if !(self.temperature > 0.0) || !(self.eval_knn_temperature > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.bank_momentum) {
            return bad(format!("bank momentum {}", self.bank_momentum));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return bad(format!("beta {}", self.beta));
        }
        if self.eval_knn_k == 0 {
            return bad("eval_knn_k must be positive".into());
        }
        if self.dataset == DatasetKind::Cifar10 && self.train_path.is_none() {
            return bad("cifar10 dataset needs train_path".into());
        }
        if self.dataset == DatasetKind::Synthetic && (self.synthetic_classes == 0 || self.synthetic_per_class == 0) {
            return bad("synthetic dataset needs classes and per_class".into());
        }
        self.augment_policy()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.merge_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.encoder_spec()
            .param_shapes()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        match self.dataset {
            DatasetKind::Cifar10 => [3, 32, 32],
            DatasetKind::Synthetic => [3, self.synthetic_size, self.synthetic_size],
        }
    }

    pub fn encoder_spec(&self) -> EncoderSpec {
        let input = self.input_shape();
        let mut spec = match &self.encoder_layers {
            None => EncoderSpec::desk_default(input, self.embed_dim),
            Some(layers) => EncoderSpec {
                input,
                layers: layers.clone(),
                embed_dim: self.embed_dim,
                channel_mean: CIFAR10_CHANNEL_MEAN.to_vec(),
            },
        };
        if let Some(mean) = &self.channel_mean {
            spec.channel_mean = mean.clone();
        }
        spec
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.synthetic_classes,
            per_class: self.synthetic_per_class,
            size: self.synthetic_size,
            separation: self.synthetic_separation,
            noise: self.synthetic_noise,
            max_shift: self.synthetic_max_shift,
            distractor: self.synthetic_distractor,
            nuisance: self.synthetic_nuisance,
            duplicate_fraction: self.synthetic_duplicate_fraction,
            seed: self.seed_data,
        }
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        AugmentPolicy {
            crop_scale: self.augment_crop_scale,
            flip_prob: self.augment_flip_prob,
            grayscale_prob: self.augment_grayscale_prob,
            brightness: self.augment_brightness,
            contrast: self.augment_contrast,
            saturation: self.augment_saturation,
            jitter_prob: self.augment_jitter_prob,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            beta: self.beta,
            mode: self.consistency,
            reduction: self.consistency_reduction,
        }
    }

    pub fn merge_config(&self) -> MergeConfig {
        MergeConfig {
            sigma: self.merge_sigma,
            target_fraction: self.merge_target_fraction,
            neighbors: self.merge_neighbors,
            stages: self.merge_stages,
            safety_cap: self.merge_safety_cap,
        }
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig {
            knn_k: self.eval_knn_k,
            knn_temperature: self.eval_knn_temperature,
            linear_epochs: self.eval_linear_epochs,
            linear_lr: self.eval_linear_lr,
            retrieval_ks: self.eval_retrieval_ks.clone(),
            seed: self.seed_model,
        }
    }

    /// Momentum-SGD hyperparameters at `epoch`.
    pub fn sgd(&self, epoch: usize) -> Sgd {
        Sgd {
            lr: self.lr_at(epoch),
            momentum: self.sgd_momentum,
            weight_decay: self.weight_decay,
        }
    }

    /// `lr · decay^(number of decay epochs ≤ epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.lr * self.lr_decay.powi(drops as i32)
    }

    /// Instances per step and views per instance.
    pub fn batch_shape(&self) -> (usize, usize) {
        match self.expansion {
            Expansion::Multi => (self.batch_size, self.k),
            Expansion::Standard => (self.batch_size * self.k, 1),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_through_json() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::from_json(&cfg.to_json()).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_schema_error() {
        assert!(matches!(
            TrainConfig::from_json(r#"{"k": 2, "kk": 3}"#),
            Err(ConfigError::Schema(_))
        ));
    }

    #[test]
    fn partial_config_takes_defaults() {
        let cfg = TrainConfig::from_json(r#"{"k": 2, "consistency": "kl"}"#).unwrap();
        assert_eq!(cfg.k, 2);
        assert_eq!(cfg.consistency, ConsistencyMode::Kl);
        assert_eq!(cfg.lr, 0.03);
    }

    #[test]
    fn lr_schedule_steps_at_decay_epochs() {
        let cfg = TrainConfig {
            lr_decay_epochs: vec![80, 140, 200],
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.03);
        assert_eq!(cfg.lr_at(79), 0.03);
        assert_eq!(cfg.lr_at(80), 0.03 * 0.1);
        assert_eq!(cfg.lr_at(140), 0.03 * 0.1f64.powi(2));
        assert_eq!(cfg.lr_at(299), 0.03 * 0.1f64.powi(3));
    }

    #[test]
    fn rejects_non_increasing_decay_epochs() {
        assert!(matches!(
            TrainConfig::from_json(r#"{"lr_decay_epochs": [5, 5]}"#),
            Err(ConfigError::Invalid(_))
        ));
    }

    #[test]
    fn standard_expansion_has_one_view() {
        let cfg = TrainConfig {
            expansion: Expansion::Standard,
            k: 4,
            batch_size: 8,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.batch_shape(), (32, 1));
    }
}

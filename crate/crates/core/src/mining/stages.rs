//! The multi-stage merge protocol: merge, then resume or restart training.

use serde::{Deserialize, Serialize};

use super::{calibrate_sigma, merge_stage, Calibration, MergeConfig, MergeReport};
use crate::config::TrainConfig;
use crate::data::ImageSet;
use crate::metrics::{MetricsRow, MetricsSink};
use crate::real::Real;
use crate::train::{bank_knn_accuracy, train, Monitor, Phase, StageMode, TrainError, TrainState};

/// What happened in one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub mode: StageMode,
    pub report: MergeReport,
    /// Set when `σ` was calibrated rather than configured.
    pub calibrated: Option<(f64, bool)>,
    pub knn_before_merge: Option<f64>,
    /// Zero-epoch continuation: the effect of row averaging alone.
    pub knn_after_merge: Option<f64>,
    pub knn_after_training: Option<f64>,
    pub epochs: usize,
}

pub struct StagesOutcome<T: Real> {
    pub state: TrainState<T>,
    pub stages: Vec<StageMetrics>,
}

fn knn<T: Real>(state: &TrainState<T>, cfg: &TrainConfig, monitor: Option<&Monitor<'_>>) -> Result<Option<f64>, TrainError> {
    monitor
        .map(|m| bank_knn_accuracy(&state.encoder, &state.bank, m, &cfg.eval_config()))
        .transpose()
}

/// Runs `cfg.merge_stages` stages on a trained state. Each stage merges the
/// current bank, then either continues training (`Resume`, for
/// `merge_stage_epochs`) or reinitializes encoder and bank keeping the groups
/// (`Scratch`, for the full `epochs`).
pub fn run_stages<T: Real>(
    mut state: TrainState<T>,
    cfg: &TrainConfig,
    mode: StageMode,
    images: &ImageSet,
    monitor: Option<&Monitor<'_>>,
    sink: &mut dyn MetricsSink,
) -> Result<StagesOutcome<T>, TrainError> {
    let mut stages = Vec::with_capacity(cfg.merge_stages);
    let first = state.phase.stage + 1;
    for stage in first..first + cfg.merge_stages {
        let knn_before_merge = knn(&state, cfg, monitor)?;
        let (sigma, calibrated) = match cfg.merge_sigma {
            Some(s) => (s, None),
            None => {
                let Calibration { sigma, reached, .. } =
                    calibrate_sigma(&state.bank, &state.groups, cfg.merge_target_fraction, cfg.merge_neighbors)?;
                (sigma, Some((sigma, reached)))
            }
        };
        let merge_cfg = MergeConfig {
            sigma: Some(sigma),
            ..cfg.merge_config()
        };
        let (groups, report) = merge_stage(&mut state.bank, &state.groups, &merge_cfg)?;
        state.groups = groups;
        let knn_after_merge = knn(&state, cfg, monitor)?;
        sink.record(&MetricsRow {
            stage: Some(stage),
            epoch: Some(state.epoch),
            knn_accuracy: knn_after_merge,
            groups: Some(report.groups),
            grouped_fraction: Some(report.grouped_fraction),
            largest_group: Some(report.largest_group),
            sigma: Some(report.sigma),
            ..MetricsRow::event("merge")
        })?;

        if mode == StageMode::Scratch {
            state.reinitialize(cfg)?;
        }
        state.phase = Phase {
            stage,
            mode: Some(mode),
            epoch: 0,
        };
        let epochs = train(&mut state, cfg, images, monitor, sink)?;
        let knn_after_training = knn(&state, cfg, monitor)?;
        stages.push(StageMetrics {
            stage,
            mode,
            report,
            calibrated,
            knn_before_merge,
            knn_after_merge,
            knn_after_training,
            epochs,
        });
    }
    Ok(StagesOutcome { state, stages })
}

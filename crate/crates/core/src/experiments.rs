//! Desk-scale ablation suites.
//!
//! Each suite trains a small grid of configurations over several seeds and
//! reports the final weighted-kNN accuracy per cell. The same code backs the
//! `ablate` command and the acceptance tests.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::{BankUpdate, DatasetKind, Expansion, TrainConfig};
use crate::data::Dataset;
use crate::losses::{ConsistencyMode, ConsistencyReduction};
use crate::metrics::{MetricsError, MetricsRow, MetricsSink};
use crate::mining::{calibrate_sigma, run_stages, Calibration, StageMode};
use crate::real::Real;
use crate::train::{load_data, train, Monitor, TrainError, TrainState};

/// Seeds used by every suite unless overridden.
pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

/// Consistency weights swept by the Table 4 suite.
pub const BETA_SWEEP: [f64; 4] = [1e2, 1e3, 1e4, 1e5];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Table1,
    Table2,
    Table4,
    Table5,
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "table1" => Ok(Self::Table1),
            "table2" => Ok(Self::Table2),
            "table4" => Ok(Self::Table4),
            "table5" => Ok(Self::Table5),
            other => Err(format!("unknown suite {other:?}")),
        }
    }
}

/// The desk-scale synthetic fixture: 8 lattice-texture classes of 64 images
/// at 16×16, with mild per-instance colour nuisance.
pub fn desk_config() -> TrainConfig {
    TrainConfig {
        synthetic_classes: 8,
        synthetic_per_class: 64,
        synthetic_test_per_class: 50,
        synthetic_distractor: 0.0,
        synthetic_nuisance: 0.2,
        epochs: 30,
        lr: 0.01,
        lr_decay_epochs: vec![20, 25],
        eval_knn_k: 20,
        eval_every: 0,
        ..TrainConfig::default()
    }
}

/// Desk-scale CIFAR-10: a stratified 2 000-image training subset and a
/// 1 000-image test subset read from a directory of binary batches.
pub fn cifar_config(dir: &Path) -> TrainConfig {
    TrainConfig {
        dataset: DatasetKind::Cifar10,
        train_path: Some(dir.to_path_buf()),
        test_path: Some(dir.join("test_batch.bin")),
        subset: Some(2000),
        test_subset: Some(1000),
        ..desk_config()
    }
}

/// The Table 5 fixture: the desk fixture with 6% exact duplicates.
pub fn duplicate_config() -> TrainConfig {
    TrainConfig {
        synthetic_duplicate_fraction: 0.06,
        merge_sigma: None,
        merge_target_fraction: (0.05, 0.10),
        merge_stages: 2,
        merge_stage_epochs: 10,
        ..desk_config()
    }
}

/// `cfg` with the model, augmentation and bank streams derived from `seed`.
/// The dataset stream is left alone so every seed sees the same images.
pub fn with_seed(cfg: &TrainConfig, seed: u64) -> TrainConfig {
    TrainConfig {
        seed_model: seed,
        seed_augment: seed.wrapping_add(100),
        seed_bank: seed.wrapping_add(200),
        ..cfg.clone()
    }
}

/// One configuration of a suite.
#[derive(Clone, Debug)]
pub struct CellSpec {
    pub label: String,
    pub config: TrainConfig,
}

/// Outcome of one cell over all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub seeds: Vec<u64>,
    pub knn: Vec<f64>,
    /// Mean adjacent-epoch bank drift per seed, epochs 2 onwards.
    pub drift: Vec<f64>,
}

impl CellResult {
    pub fn mean_knn(&self) -> f64 {
        mean(&self.knn)
    }

    pub fn std_knn(&self) -> f64 {
        std(&self.knn)
    }

    pub fn mean_drift(&self) -> f64 {
        mean(&self.drift)
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Forwards rows to an inner sink tagged with a cell label and seed.
struct Tagged<'a> {
    inner: &'a mut dyn MetricsSink,
    label: &'a str,
    seed: u64,
    epochs: Vec<MetricsRow>,
}

impl MetricsSink for Tagged<'_> {
    fn record(&mut self, row: &MetricsRow) -> Result<(), MetricsError> {
        let row = MetricsRow {
            label: Some(self.label.to_string()),
            seed: Some(self.seed),
            ..row.clone()
        };
        if row.event == "epoch" {
            self.epochs.push(row.clone());
        }
        self.inner.record(&row)
    }
}

fn final_knn<T: Real>(state: &TrainState<T>, cfg: &TrainConfig, monitor: &Monitor<'_>) -> Result<f64, TrainError> {
    crate::train::bank_knn_accuracy(&state.encoder, &state.bank, monitor, &cfg.eval_config())
}

fn drift_after_first(rows: &[MetricsRow]) -> f64 {
    let d: Vec<f64> = rows.iter().skip(1).filter_map(|r| r.bank_drift).collect();
    mean(&d)
}

/// Data shared by all cells of a suite.
pub struct SuiteData {
    pub train: Dataset,
    pub test: Dataset,
}

impl SuiteData {
    pub fn load(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let (train, test) = load_data(cfg)?;
        let test = test.ok_or(TrainError::MissingTestSet)?;
        Ok(Self { train, test })
    }

    pub fn monitor(&self) -> Monitor<'_> {
        Monitor {
            train_labels: &self.train.labels,
            test: &self.test,
        }
    }
}

/// Trains one configuration from scratch for `seed`; returns the final kNN
/// accuracy, the mean drift, and the trained state.
pub fn run_cell<T: Real>(
    cell: &CellSpec,
    seed: u64,
    data: &SuiteData,
    sink: &mut dyn MetricsSink,
) -> Result<(f64, f64, TrainState<T>), TrainError> {
    let cfg = with_seed(&cell.config, seed);
    let monitor = data.monitor();
    let mut state = TrainState::<T>::init(&cfg, data.train.len())?;
    let mut tagged = Tagged {
        inner: sink,
        label: &cell.label,
        seed,
        epochs: Vec::new(),
    };
    train(&mut state, &cfg, &data.train.images, None, &mut tagged)?;
    let knn = final_knn(&state, &cfg, &monitor)?;
    let drift = drift_after_first(&tagged.epochs);
    Ok((knn, drift, state))
}

fn summary_rows(result: &CellResult, sink: &mut dyn MetricsSink) -> Result<(), MetricsError> {
    for ((&seed, &knn), &drift) in result.seeds.iter().zip(&result.knn).zip(&result.drift) {
        sink.record(&MetricsRow {
            label: Some(result.label.clone()),
            seed: Some(seed),
            knn_accuracy: Some(knn),
            bank_drift: Some(drift),
            ..MetricsRow::event("ablation")
        })?;
    }
    sink.record(&MetricsRow {
        label: Some(result.label.clone()),
        knn_accuracy: Some(result.mean_knn()),
        bank_drift: Some(result.mean_drift()),
        metric: Some("knn_std".into()),
        value: Some(result.std_knn()),
        ..MetricsRow::event("summary")
    })
}

/// Runs every cell over `seeds`, emitting per-seed and summary rows.
pub fn run_cells<T: Real>(
    cells: &[CellSpec],
    seeds: &[u64],
    data: &SuiteData,
    sink: &mut dyn MetricsSink,
) -> Result<Vec<CellResult>, TrainError> {
    let mut results = Vec::with_capacity(cells.len());
    for cell in cells {
        let mut result = CellResult {
            label: cell.label.clone(),
            seeds: seeds.to_vec(),
            knn: Vec::new(),
            drift: Vec::new(),
        };
        for &seed in seeds {
            let (knn, drift, _) = run_cell::<T>(cell, seed, data, sink)?;
            result.knn.push(knn);
            result.drift.push(drift);
        }
        summary_rows(&result, sink)?;
        results.push(result);
    }
    Ok(results)
}

fn cell(label: &str, config: TrainConfig) -> CellSpec {
    CellSpec {
        label: label.to_string(),
        config,
    }
}

/// Table 1 grid: the K=1 baseline, then standard and multi-augmentation
/// expansion at K=2 and K=4. The learning rate is held fixed across cells.
pub fn table1_cells(base: &TrainConfig) -> Vec<CellSpec> {
    let at = |k: usize, expansion: Expansion| TrainConfig {
        k,
        expansion,
        ..base.clone()
    };
    vec![
        cell("baseline k=1", at(1, Expansion::Multi)),
        cell("standard k=2", at(2, Expansion::Standard)),
        cell("multi k=2", at(2, Expansion::Multi)),
        cell("standard k=4", at(4, Expansion::Standard)),
        cell("multi k=4", at(4, Expansion::Multi)),
    ]
}

/// Table 2 grid: bank update from one view versus all views.
pub fn table2_cells(base: &TrainConfig) -> Vec<CellSpec> {
    let at = |k: usize, update: BankUpdate| TrainConfig {
        k,
        bank_update: update,
        ..base.clone()
    };
    vec![
        cell("single k=2", at(2, BankUpdate::Single)),
        cell("all k=2", at(2, BankUpdate::All)),
        cell("single k=4", at(4, BankUpdate::Single)),
        cell("all k=4", at(4, BankUpdate::All)),
    ]
}

/// Table 4 grid at K=2: no consistency, then KL and ℓ2 across the β sweep.
pub fn table4_cells(base: &TrainConfig) -> Vec<CellSpec> {
    let at = |mode: ConsistencyMode, beta: f64| TrainConfig {
        k: 2,
        consistency: mode,
        consistency_reduction: ConsistencyReduction::Mean,
        beta,
        ..base.clone()
    };
    let mut cells = vec![cell("none k=2", at(ConsistencyMode::None, 0.0))];
    for (name, mode) in [("kl", ConsistencyMode::Kl), ("l2", ConsistencyMode::L2)] {
        for beta in BETA_SWEEP {
            cells.push(cell(&format!("{name} beta={beta:e}"), at(mode, beta)));
        }
    }
    cells
}

/// Best mean over cells whose label starts with `prefix`.
pub fn best_with_prefix<'a>(results: &'a [CellResult], prefix: &str) -> Option<&'a CellResult> {
    results
        .iter()
        .filter(|r| r.label.starts_with(prefix))
        .max_by(|a, b| a.mean_knn().total_cmp(&b.mean_knn()))
}

pub fn find<'a>(results: &'a [CellResult], label: &str) -> Option<&'a CellResult> {
    results.iter().find(|r| r.label == label)
}

/// Per-seed accuracies of one merge protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRun {
    pub mode: StageMode,
    /// kNN of the shared base run, before any merge.
    pub base: Vec<f64>,
    /// `after[s][i]`: kNN after training stage `i + 1` for seed index `s`.
    pub after: Vec<Vec<f64>>,
    /// Grouped fraction reached at each stage, per seed.
    pub grouped: Vec<Vec<f64>>,
}

impl StageRun {
    /// Mean over seeds of the accuracy after stage `stage` (1-based).
    pub fn mean_after(&self, stage: usize) -> f64 {
        mean(&self.after.iter().map(|a| a[stage - 1]).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table5Result {
    pub seeds: Vec<u64>,
    pub resume: StageRun,
    pub scratch: StageRun,
    /// Calibration of the first merge on each seed's base bank.
    pub calibrations: Vec<(f64, f64, bool)>,
}

/// Table 5: train a base model per seed, then run the merge stages in both
/// modes from that same trained state.
pub fn run_table5<T: Real>(
    base: &TrainConfig,
    seeds: &[u64],
    data: &SuiteData,
    sink: &mut dyn MetricsSink,
) -> Result<Table5Result, TrainError> {
    let empty = |mode| StageRun {
        mode,
        base: Vec::new(),
        after: Vec::new(),
        grouped: Vec::new(),
    };
    let mut resume = empty(StageMode::Resume);
    let mut scratch = empty(StageMode::Scratch);
    let mut calibrations = Vec::new();
    let monitor = data.monitor();
    let base_cell = cell("base", base.clone());
    for &seed in seeds {
        let cfg = with_seed(base, seed);
        let (base_knn, _, state) = run_cell::<T>(&base_cell, seed, data, sink)?;
        let Calibration {
            sigma,
            grouped_fraction,
            reached,
            ..
        } = calibrate_sigma(&state.bank, &state.groups, cfg.merge_target_fraction, cfg.merge_neighbors)?;
        calibrations.push((sigma, grouped_fraction, reached));
        for run in [&mut resume, &mut scratch] {
            let label = format!("{:?}", run.mode).to_lowercase();
            let mut tagged = Tagged {
                inner: sink,
                label: &label,
                seed,
                epochs: Vec::new(),
            };
            let outcome = run_stages(state.clone(), &cfg, run.mode, &data.train.images, Some(&monitor), &mut tagged)?;
            let after: Vec<f64> = outcome
                .stages
                .iter()
                .map(|s| s.knn_after_training.unwrap_or(f64::NAN))
                .collect();
            for (i, (&knn, stage)) in after.iter().zip(&outcome.stages).enumerate() {
                sink.record(&MetricsRow {
                    label: Some(label.clone()),
                    seed: Some(seed),
                    stage: Some(i + 1),
                    knn_accuracy: Some(knn),
                    grouped_fraction: Some(stage.report.grouped_fraction),
                    sigma: Some(stage.report.sigma),
                    ..MetricsRow::event("ablation")
                })?;
            }
            run.base.push(base_knn);
            run.grouped.push(outcome.stages.iter().map(|s| s.report.grouped_fraction).collect());
            run.after.push(after);
        }
    }
    for run in [&resume, &scratch] {
        let label = format!("{:?}", run.mode).to_lowercase();
        for stage in 1..=base.merge_stages {
            sink.record(&MetricsRow {
                label: Some(label.clone()),
                stage: Some(stage),
                knn_accuracy: Some(run.mean_after(stage)),
                ..MetricsRow::event("summary")
            })?;
        }
    }
    Ok(Table5Result {
        seeds: seeds.to_vec(),
        resume,
        scratch,
        calibrations,
    })
}

/// Outcome of `ablate`: cell results for the grid suites, or the staged
/// result for Table 5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SuiteResult {
    Cells(Vec<CellResult>),
    Stages(Table5Result),
}

/// Runs one suite on `base` (the desk fixture, or the duplicate fixture for
/// Table 5 when `base` has no duplicates).
pub fn run_suite<T: Real>(
    suite: Suite,
    base: &TrainConfig,
    seeds: &[u64],
    sink: &mut dyn MetricsSink,
) -> Result<SuiteResult, TrainError> {
    match suite {
        Suite::Table5 => {
            let base = if base.dataset == DatasetKind::Synthetic && base.synthetic_duplicate_fraction == 0.0 {
                TrainConfig {
                    synthetic_duplicate_fraction: duplicate_config().synthetic_duplicate_fraction,
                    ..base.clone()
                }
            } else {
                base.clone()
            };
            let data = SuiteData::load(&base)?;
            Ok(SuiteResult::Stages(run_table5::<T>(&base, seeds, &data, sink)?))
        }
        grid => {
            let cells = match grid {
                Suite::Table1 => table1_cells(base),
                Suite::Table2 => table2_cells(base),
                _ => table4_cells(base),
            };
            let data = SuiteData::load(base)?;
            Ok(SuiteResult::Cells(run_cells::<T>(&cells, seeds, &data, sink)?))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_grid_shape() {
        let cells = table1_cells(&desk_config());
        let labels: Vec<&str> = cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(
            labels,
            ["baseline k=1", "standard k=2", "multi k=2", "standard k=4", "multi k=4"]
        );
        assert_eq!(cells[3].config.batch_shape(), (256, 1));
        assert_eq!(cells[4].config.batch_shape(), (64, 4));
    }

    #[test]
    fn table4_sweeps_both_modes() {
        let cells = table4_cells(&desk_config());
        assert_eq!(cells.len(), 1 + 2 * BETA_SWEEP.len());
        assert!(cells.iter().all(|c| c.config.k == 2));
    }

    #[test]
    fn seeds_leave_data_alone() {
        let a = with_seed(&desk_config(), 1);
        let b = with_seed(&desk_config(), 2);
        assert_eq!(a.seed_data, b.seed_data);
        assert_ne!(a.seed_model, b.seed_model);
    }

    #[test]
    fn summary_statistics() {
        assert_eq!(mean(&[1.0, 2.0, 3.0]), 2.0);
        assert_eq!(std(&[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(std(&[5.0]), 0.0);
    }

    #[test]
    fn suite_names() {
        assert_eq!("table4".parse::<Suite>().unwrap(), Suite::Table4);
        assert!("table3".parse::<Suite>().is_err());
    }
}

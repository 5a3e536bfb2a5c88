//! Command-line front end.
//!
//! Exit codes: 0 success, 2 usage error (unknown flag, bad value), 3 file
//! not readable or writable, 4 config schema violation, 5 malformed dataset,
//! 6 malformed checkpoint, 7 training or evaluation failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;
use thiserror::Error;

use crate::checkpoint::{AnyCheckpoint, Checkpoint, CheckpointError};
use crate::config::{ConfigError, TrainConfig};
use crate::data::DataError;
use crate::evaluate::{knn_classify, linear_probe, nmi, recall_at_k};
use crate::experiments::{self, CellResult, Suite, SuiteResult};
use crate::membank::bank_drift;
use crate::metrics::{CsvMetrics, MetricsError, MetricsSink, NullSink};
use crate::mining::{merge_stage, run_stages, MergeConfig, StageMode};
use crate::real::{Precision, Real};
use crate::train::{embed_all, load_data, run_epochs, Monitor, TrainError, TrainState};

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_CONFIG: i32 = 4;
pub const EXIT_DATA: i32 = 5;
pub const EXIT_CHECKPOINT: i32 = 6;
pub const EXIT_FAILURE: i32 = 7;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Usage(String),
}

fn data_code(e: &DataError) -> i32 {
    match e {
        DataError::Io { .. } => EXIT_IO,
        _ => EXIT_DATA,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(ConfigError::Io { .. }) => EXIT_IO,
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Checkpoint(CheckpointError::Io { .. }) => EXIT_IO,
            CliError::Checkpoint(_) => EXIT_CHECKPOINT,
            CliError::Train(TrainError::Data(e)) => data_code(e),
            CliError::Train(TrainError::Metrics(MetricsError::Io { .. })) => EXIT_IO,
            CliError::Train(_) => EXIT_FAILURE,
            CliError::Metrics(MetricsError::Io { .. }) => EXIT_IO,
            CliError::Metrics(_) => EXIT_FAILURE,
            CliError::Io { .. } => EXIT_IO,
            CliError::Usage(_) => EXIT_USAGE,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "memdisc", version, about = "Memory-bank instance discrimination")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Resume,
    Scratch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SuiteArg {
    Table1,
    Table2,
    Table4,
    Table5,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config, writing a checkpoint after every epoch.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory; overrides `checkpoint_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one offline merge stage on a checkpoint.
    Merge {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "auto_sigma")]
        sigma: Option<f64>,
        #[arg(long)]
        auto_sigma: bool,
        /// Where to write the merged checkpoint; defaults to `merged.ckpt`
        /// next to the input.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the configured merge stages, resuming or restarting after each.
    Stages {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Weighted kNN accuracy of held-out images against the memory bank.
    EvalKnn {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Linear probe on frozen embeddings.
    EvalLinear {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Recall@k and NMI of held-out embeddings.
    EvalRetrieval {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Mean cosine distance between the banks of two checkpoints.
    Drift {
        #[arg(long)]
        ckpt_a: PathBuf,
        #[arg(long)]
        ckpt_b: PathBuf,
    },
    /// Run a desk-scale ablation suite.
    Ablate {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        /// Base config; defaults to the built-in synthetic desk fixture.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = experiments::DEFAULT_SEEDS)]
        seeds: Vec<u64>,
        /// CSV file receiving every epoch and summary row.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
}

/// Parses `args` (program name first) and runs the command, writing
/// results to `out`.
pub fn run_from<I, S>(args: I, out: &mut dyn Write) -> Result<(), CliError>
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli.command, out),
        // --help and --version
        Err(e) if !e.use_stderr() => write!(out, "{e}").map_err(|source| CliError::Io {
            path: PathBuf::from("<stdout>"),
            source,
        }),
        Err(e) => Err(CliError::Usage(e.to_string())),
    }
}

fn emit(out: &mut dyn Write, value: serde_json::Value) -> Result<(), CliError> {
    writeln!(out, "{value}").map_err(|source| CliError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    })
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match command {
        Command::Train { config, resume, out: dir } => {
            let cfg = TrainConfig::load(&config)?;
            let dir = dir.unwrap_or_else(|| checkpoint_dir(&cfg));
            match cfg.precision {
                Precision::F32 => train_cmd::<f32>(&cfg, resume.as_deref(), &dir, out),
                Precision::F64 => train_cmd::<f64>(&cfg, resume.as_deref(), &dir, out),
            }
        }
        Command::Merge {
            ckpt,
            sigma,
            auto_sigma,
            out: target,
        } => {
            let target = target.unwrap_or_else(|| sibling(&ckpt, "merged.ckpt"));
            match AnyCheckpoint::load(&ckpt)? {
                AnyCheckpoint::F32(c) => merge_cmd(c, sigma, auto_sigma, &target, out),
                AnyCheckpoint::F64(c) => merge_cmd(c, sigma, auto_sigma, &target, out),
            }
        }
        Command::Stages { ckpt, mode, out: dir } => {
            let mode = match mode {
                ModeArg::Resume => StageMode::Resume,
                ModeArg::Scratch => StageMode::Scratch,
            };
            match AnyCheckpoint::load(&ckpt)? {
                AnyCheckpoint::F32(c) => stages_cmd(c, mode, &ckpt, dir, out),
                AnyCheckpoint::F64(c) => stages_cmd(c, mode, &ckpt, dir, out),
            }
        }
        Command::EvalKnn { ckpt } => match AnyCheckpoint::load(&ckpt)? {
            AnyCheckpoint::F32(c) => eval_knn_cmd(&c, out),
            AnyCheckpoint::F64(c) => eval_knn_cmd(&c, out),
        },
        Command::EvalLinear { ckpt } => match AnyCheckpoint::load(&ckpt)? {
            AnyCheckpoint::F32(c) => eval_linear_cmd(&c, out),
            AnyCheckpoint::F64(c) => eval_linear_cmd(&c, out),
        },
        Command::EvalRetrieval { ckpt } => match AnyCheckpoint::load(&ckpt)? {
            AnyCheckpoint::F32(c) => eval_retrieval_cmd(&c, out),
            AnyCheckpoint::F64(c) => eval_retrieval_cmd(&c, out),
        },
        Command::Drift { ckpt_a, ckpt_b } => {
            let drift = match (AnyCheckpoint::load(&ckpt_a)?, AnyCheckpoint::load(&ckpt_b)?) {
                (AnyCheckpoint::F32(a), AnyCheckpoint::F32(b)) => {
                    bank_drift(&a.state.bank.snapshot(), &b.state.bank).map_err(TrainError::from)?
                }
                (AnyCheckpoint::F64(a), AnyCheckpoint::F64(b)) => {
                    bank_drift(&a.state.bank.snapshot(), &b.state.bank).map_err(TrainError::from)?
                }
                _ => return Err(CliError::Usage("checkpoints have different precisions".into())),
            };
            emit(out, json!({ "drift": drift }))
        }
        Command::Ablate {
            suite,
            config,
            seeds,
            metrics,
        } => {
            let suite = match suite {
                SuiteArg::Table1 => Suite::Table1,
                SuiteArg::Table2 => Suite::Table2,
                SuiteArg::Table4 => Suite::Table4,
                SuiteArg::Table5 => Suite::Table5,
            };
            let base = match config {
                Some(path) => TrainConfig::load(&path)?,
                None if suite == Suite::Table5 => experiments::duplicate_config(),
                None => experiments::desk_config(),
            };
            let mut sink: Box<dyn MetricsSink> = match metrics {
                Some(path) => Box::new(CsvMetrics::open(&path)?),
                None => Box::new(NullSink),
            };
            let result = match base.precision {
                Precision::F32 => experiments::run_suite::<f32>(suite, &base, &seeds, sink.as_mut())?,
                Precision::F64 => experiments::run_suite::<f64>(suite, &base, &seeds, sink.as_mut())?,
            };
            match result {
                SuiteResult::Cells(cells) => {
                    for c in &cells {
                        emit(out, cell_json(c))?;
                    }
                }
                SuiteResult::Stages(t5) => {
                    for run in [&t5.resume, &t5.scratch] {
                        let stages: Vec<f64> = (1..=base.merge_stages).map(|s| run.mean_after(s)).collect();
                        emit(
                            out,
                            json!({
                                "mode": run.mode,
                                "base_knn": experiments::mean(&run.base),
                                "stage_knn": stages,
                                "per_seed": run.after,
                                "grouped_fraction": run.grouped,
                            }),
                        )?;
                    }
                }
            }
            Ok(())
        }
    }
}

fn cell_json(c: &CellResult) -> serde_json::Value {
    json!({
        "label": c.label,
        "knn_mean": c.mean_knn(),
        "knn_std": c.std_knn(),
        "knn": c.knn,
        "drift_mean": c.mean_drift(),
        "seeds": c.seeds,
    })
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn checkpoint_dir(cfg: &TrainConfig) -> PathBuf {
    cfg.checkpoint_dir.clone().unwrap_or_else(|| PathBuf::from("checkpoints"))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn open_metrics(cfg: &TrainConfig, dir: &Path) -> Result<CsvMetrics, CliError> {
    let path = cfg.metrics_path.clone().unwrap_or_else(|| dir.join("metrics.csv"));
    Ok(CsvMetrics::open(&path)?)
}

fn train_cmd<T: Real>(
    cfg: &TrainConfig,
    resume: Option<&Path>,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (data, test) = load_data(cfg)?;
    let mut state = match resume {
        Some(path) => Checkpoint::<T>::load(path)?.state,
        None => TrainState::<T>::init(cfg, data.len())?,
    };
    create_dir(dir)?;
    let mut sink = open_metrics(cfg, dir)?;
    let monitor = test.as_ref().map(|t| Monitor {
        train_labels: &data.labels,
        test: t,
    });
    let save = |state: &TrainState<T>, name: &str| -> Result<(), CliError> {
        let ckpt = Checkpoint {
            config: cfg.clone(),
            state: state.clone(),
        };
        Ok(ckpt.save(&dir.join(name))?)
    };
    while run_epochs(&mut state, cfg, &data.images, monitor.as_ref(), &mut sink, 1)? == 1 {
        save(&state, &format!("e{:04}.ckpt", state.epoch))?;
        save(&state, "last.ckpt")?;
    }
    save(&state, "last.ckpt")?;
    emit(
        out,
        json!({
            "epoch": state.epoch,
            "checkpoint": dir.join("last.ckpt"),
            "metrics": sink.path(),
        }),
    )
}

fn merge_cmd<T: Real>(
    mut ckpt: Checkpoint<T>,
    sigma: Option<f64>,
    auto_sigma: bool,
    target: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = MergeConfig {
        sigma: if auto_sigma { None } else { sigma.or(ckpt.config.merge_sigma) },
        ..ckpt.config.merge_config()
    };
    let state = &mut ckpt.state;
    let (groups, report) = merge_stage(&mut state.bank, &state.groups, &cfg).map_err(TrainError::from)?;
    state.groups = groups;
    ckpt.save(target)?;
    emit(
        out,
        json!({
            "sigma": report.sigma,
            "grouped_fraction": report.grouped_fraction,
            "groups": report.groups,
            "largest_group": report.largest_group,
            "new_unions": report.new_unions,
            "checkpoint": target,
        }),
    )
}

fn stages_cmd<T: Real>(
    ckpt: Checkpoint<T>,
    mode: StageMode,
    source: &Path,
    dir: Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let cfg = ckpt.config;
    let dir = dir.unwrap_or_else(|| source.parent().unwrap_or(Path::new(".")).to_path_buf());
    create_dir(&dir)?;
    let (data, test) = load_data(&cfg)?;
    let monitor = test.as_ref().map(|t| Monitor {
        train_labels: &data.labels,
        test: t,
    });
    let mut sink = open_metrics(&cfg, &dir)?;
    let outcome = run_stages(ckpt.state, &cfg, mode, &data.images, monitor.as_ref(), &mut sink)?;
    let name = format!("stages-{}.ckpt", if mode == StageMode::Resume { "resume" } else { "scratch" });
    let target = dir.join(name);
    Checkpoint {
        config: cfg,
        state: outcome.state,
    }
    .save(&target)?;
    for stage in &outcome.stages {
        emit(out, serde_json::to_value(stage).expect("stage metrics serialize"))?;
    }
    emit(out, json!({ "checkpoint": target }))
}

fn held_out(cfg: &TrainConfig) -> Result<(crate::data::Dataset, crate::data::Dataset), CliError> {
    let (train, test) = load_data(cfg)?;
    let test = test.ok_or(TrainError::MissingTestSet)?;
    Ok((train, test))
}

fn eval_knn_cmd<T: Real>(ckpt: &Checkpoint<T>, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = &ckpt.config;
    let (train, test) = held_out(cfg)?;
    let bank = &ckpt.state.bank;
    if bank.n() != train.len() {
        return Err(TrainError::SizeMismatch {
            images: train.len(),
            bank: bank.n(),
        }
        .into());
    }
    let queries = embed_all(&ckpt.state.encoder, &test.images)?;
    let k = cfg.eval_knn_k.min(bank.n());
    let result = knn_classify(
        bank.rows(),
        train.labels.labels(),
        queries.data(),
        bank.dim(),
        k,
        cfg.eval_knn_temperature,
    )
    .map_err(TrainError::from)?;
    emit(
        out,
        json!({ "knn_accuracy": result.accuracy(test.labels.labels()), "k": k, "queries": test.len() }),
    )
}

fn eval_linear_cmd<T: Real>(ckpt: &Checkpoint<T>, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = &ckpt.config;
    let (train, test) = held_out(cfg)?;
    let encoder = &ckpt.state.encoder;
    let tr = embed_all(encoder, &train.images)?;
    let te = embed_all(encoder, &test.images)?;
    let acc = linear_probe(
        tr.data(),
        train.labels.labels(),
        te.data(),
        test.labels.labels(),
        cfg.embed_dim,
        &cfg.eval_config(),
    )
    .map_err(TrainError::from)?;
    emit(out, json!({ "linear_accuracy": acc }))
}

fn eval_retrieval_cmd<T: Real>(ckpt: &Checkpoint<T>, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = &ckpt.config;
    let (_, test) = held_out(cfg)?;
    let feats = embed_all(&ckpt.state.encoder, &test.images)?;
    let labels = test.labels.labels();
    let report = recall_at_k(feats.data(), labels, cfg.embed_dim, &cfg.eval_retrieval_ks).map_err(TrainError::from)?;
    let nmi = nmi(feats.data(), labels, cfg.embed_dim, cfg.seed_data).map_err(TrainError::from)?;
    let recalls: serde_json::Map<String, serde_json::Value> = report
        .recalls
        .iter()
        .map(|(k, r)| (format!("R@{k}"), json!(r)))
        .collect();
    emit(
        out,
        json!({ "recall": recalls, "nmi": nmi, "singleton_queries": report.singleton_queries }),
    )
}

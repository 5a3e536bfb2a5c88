//! Append-only CSV metrics.
//!
//! Every event (epoch, evaluation, merge, ablation cell) is one row of the
//! same fixed column set; fields that do not apply are left empty.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metrics file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metrics file {path} has header {found:?}, expected {expected:?}")]
    HeaderMismatch { path: PathBuf, found: String, expected: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub event: String,
    pub label: Option<String>,
    pub seed: Option<u64>,
    pub stage: Option<usize>,
    pub epoch: Option<usize>,
    pub lr: Option<f64>,
    pub ce: Option<f64>,
    pub cons: Option<f64>,
    pub total: Option<f64>,
    pub mean_positive_logit: Option<f64>,
    pub mean_entropy: Option<f64>,
    pub bank_drift: Option<f64>,
    pub cancelled_updates: Option<u64>,
    pub knn_accuracy: Option<f64>,
    pub linear_accuracy: Option<f64>,
    pub groups: Option<usize>,
    pub grouped_fraction: Option<f64>,
    pub largest_group: Option<usize>,
    pub sigma: Option<f64>,
    pub metric: Option<String>,
    pub value: Option<f64>,
}

impl MetricsRow {
    pub fn event(name: &str) -> Self {
        Self {
            event: name.to_string(),
            ..Self::default()
        }
    }
}

pub const HEADER: &str = "event,label,seed,stage,epoch,lr,ce,cons,total,mean_positive_logit,mean_entropy,\
bank_drift,cancelled_updates,knn_accuracy,linear_accuracy,groups,grouped_fraction,largest_group,sigma,metric,value";

/// Receives metrics rows as they are produced.
pub trait MetricsSink {
    fn record(&mut self, row: &MetricsRow) -> Result<(), MetricsError>;
}

impl MetricsSink for Vec<MetricsRow> {
    fn record(&mut self, row: &MetricsRow) -> Result<(), MetricsError> {
        self.push(row.clone());
        Ok(())
    }
}

/// Discards every row.
pub struct NullSink;

impl MetricsSink for NullSink {
    fn record(&mut self, _: &MetricsRow) -> Result<(), MetricsError> {
        Ok(())
    }
}

/// Appends rows to a CSV file, writing the header when the file is new and
/// checking it otherwise.
pub struct CsvMetrics {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvMetrics {
    pub fn open(path: &Path) -> Result<Self, MetricsError> {
        let io = |source| MetricsError::Io {
            path: path.to_path_buf(),
            source,
        };
        let existing = path.exists() && std::fs::metadata(path).map_err(io)?.len() > 0;
        if existing {
            let mut first = String::new();
            BufReader::new(File::open(path).map_err(io)?)
                .read_line(&mut first)
                .map_err(io)?;
            let found = first.trim_end().to_string();
            if found != HEADER {
                return Err(MetricsError::HeaderMismatch {
                    path: path.to_path_buf(),
                    found,
                    expected: HEADER.to_string(),
                });
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path).map_err(io)?;
        if !existing {
            writeln!(file, "{HEADER}").map_err(io)?;
        }
        let writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        Ok(Self {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl MetricsSink for CsvMetrics {
    fn record(&mut self, row: &MetricsRow) -> Result<(), MetricsError> {
        self.writer.serialize(row)?;
        self.writer.flush().map_err(|source| MetricsError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

/// Reads every row of a metrics file.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(MetricsError::from)).collect()
}

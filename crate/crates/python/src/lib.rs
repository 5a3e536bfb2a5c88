//! Python bindings: configs, the memory bank, group tables, merging,
//! evaluation helpers, training and checkpoints. Banks are exposed in f64.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use memdisc::checkpoint::{AnyCheckpoint, Checkpoint as CoreCheckpoint};
use memdisc::config::TrainConfig as CoreConfig;
use memdisc::experiments::{self, Suite};
use memdisc::membank::{GroupTable as CoreGroups, MemoryBank as CoreBank};
use memdisc::metrics::MetricsRow;
use memdisc::mining::MergeConfig;
use memdisc::real::{Precision, Real};
use memdisc::train::{load_data, train as core_train, Monitor, TrainState};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn flatten(rows: Vec<Vec<f64>>) -> PyResult<(Vec<f64>, usize)> {
    let dim = rows.first().map_or(0, Vec::len);
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(PyValueError::new_err("rows must be non-empty and of equal length"));
    }
    Ok((rows.concat(), dim))
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        serde_json::Value::Null => py.None().into_bound(py),
        serde_json::Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        serde_json::Value::Number(n) => match n.as_u64() {
            Some(u) => u.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        serde_json::Value::String(s) => s.into_pyobject(py)?.into_any(),
        serde_json::Value::Array(a) => {
            let items = a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        serde_json::Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

fn to_py<'py>(py: Python<'py>, v: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    json_to_py(py, &serde_json::to_value(v).map_err(value_err)?)
}

/// Flat training configuration; unknown keys are rejected.
#[pyclass(name = "TrainConfig", from_py_object)]
#[derive(Clone)]
struct TrainConfig {
    inner: CoreConfig,
}

#[pymethods]
impl TrainConfig {
    #[new]
    #[pyo3(signature = (json=None))]
    fn new(json: Option<&str>) -> PyResult<Self> {
        let inner = match json {
            Some(text) => CoreConfig::from_json(text).map_err(value_err)?,
            None => CoreConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        CoreConfig::load(&path)
            .map(|inner| Self { inner })
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    /// The built-in desk-scale synthetic fixture.
    #[staticmethod]
    fn desk() -> Self {
        Self {
            inner: experiments::desk_config(),
        }
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn __repr__(&self) -> String {
        format!(
            "TrainConfig(k={}, batch_size={}, epochs={}, consistency={:?})",
            self.inner.k, self.inner.batch_size, self.inner.epochs, self.inner.consistency
        )
    }
}

/// One unit-norm row per instance.
#[pyclass(name = "MemoryBank", from_py_object)]
#[derive(Clone)]
struct MemoryBank {
    inner: CoreBank<f64>,
}

#[pymethods]
impl MemoryBank {
    #[staticmethod]
    #[pyo3(signature = (n, dim, momentum=0.5, seed=0))]
    fn random(n: usize, dim: usize, momentum: f64, seed: u64) -> PyResult<Self> {
        if n == 0 || dim == 0 {
            return Err(PyValueError::new_err("n and dim must be positive"));
        }
        let inner = CoreBank::random(n, dim, momentum, seed).map_err(value_err)?;
        Ok(Self { inner })
    }

    /// Bank from explicit rows; each row is normalized.
    #[staticmethod]
    #[pyo3(signature = (rows, momentum=0.5))]
    fn from_rows(rows: Vec<Vec<f64>>, momentum: f64) -> PyResult<Self> {
        let n = rows.len();
        let (flat, dim) = flatten(rows)?;
        let inner = CoreBank::from_rows(n, dim, momentum, flat).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn momentum(&self) -> f64 {
        self.inner.momentum()
    }

    fn row(&self, slot: usize) -> PyResult<Vec<f64>> {
        self.inner.lookup(slot).map(<[f64]>::to_vec).map_err(value_err)
    }

    fn rows(&self) -> Vec<Vec<f64>> {
        self.inner.rows().chunks(self.inner.dim()).map(<[f64]>::to_vec).collect()
    }

    /// Momentum update of one slot from `K` features; returns False when
    /// the blend cancelled and the row was left alone.
    fn update(&mut self, slot: usize, feats: Vec<Vec<f64>>) -> PyResult<bool> {
        let (flat, _) = flatten(feats)?;
        self.inner.update(slot, &flat).map_err(value_err)
    }

    fn update_group(&mut self, groups: &GroupTable, instance: usize, feats: Vec<Vec<f64>>) -> PyResult<bool> {
        let (flat, _) = flatten(feats)?;
        if instance >= groups.inner.len() {
            return Err(PyValueError::new_err("instance out of range"));
        }
        self.inner.update_group(&groups.inner, instance, &flat).map_err(value_err)
    }

    fn max_norm_deviation(&self) -> f64 {
        self.inner.max_norm_deviation()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }
}

/// Union-find over instances; the smallest member is always the root.
#[pyclass(name = "GroupTable", from_py_object)]
#[derive(Clone)]
struct GroupTable {
    inner: CoreGroups,
}

impl GroupTable {
    fn check(&self, i: usize) -> PyResult<()> {
        if i >= self.inner.len() {
            return Err(PyValueError::new_err(format!("instance {i} out of range")));
        }
        Ok(())
    }
}

#[pymethods]
impl GroupTable {
    #[new]
    fn new(n: usize) -> Self {
        Self {
            inner: CoreGroups::identity(n),
        }
    }

    fn union(&mut self, a: usize, b: usize) -> PyResult<bool> {
        self.check(a)?;
        self.check(b)?;
        Ok(self.inner.union(a, b))
    }

    fn root(&self, i: usize) -> PyResult<usize> {
        self.check(i)?;
        Ok(self.inner.root(i))
    }

    fn group_of(&self, i: usize) -> PyResult<Vec<usize>> {
        self.check(i)?;
        Ok(self.inner.group_of(i).to_vec())
    }

    fn parents(&self) -> Vec<usize> {
        self.inner.parents().to_vec()
    }

    #[getter]
    fn group_count(&self) -> usize {
        self.inner.group_count()
    }

    #[getter]
    fn grouped_count(&self) -> usize {
        self.inner.grouped_count()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn bank_f64<T: Real>(bank: &CoreBank<T>) -> CoreBank<f64> {
    let rows = bank.rows().iter().map(|v| v.as_f64()).collect();
    CoreBank::from_rows(bank.n(), bank.dim(), bank.momentum(), rows).expect("bank shape is valid")
}

/// A training checkpoint of either precision.
#[pyclass(name = "Checkpoint")]
struct Checkpoint {
    inner: AnyCheckpoint,
}

#[pymethods]
impl Checkpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        AnyCheckpoint::load(&path)
            .map(|inner| Self { inner })
            .map_err(|e| PyIOError::new_err(e.to_string()))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let result = match &self.inner {
            AnyCheckpoint::F32(c) => c.save(&path),
            AnyCheckpoint::F64(c) => c.save(&path),
        };
        result.map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn config(&self) -> TrainConfig {
        TrainConfig {
            inner: self.inner.config().clone(),
        }
    }

    #[getter]
    fn epoch(&self) -> usize {
        match &self.inner {
            AnyCheckpoint::F32(c) => c.state.epoch,
            AnyCheckpoint::F64(c) => c.state.epoch,
        }
    }

    /// The memory bank, converted to f64.
    fn bank(&self) -> MemoryBank {
        let inner = match &self.inner {
            AnyCheckpoint::F32(c) => bank_f64(&c.state.bank),
            AnyCheckpoint::F64(c) => c.state.bank.clone(),
        };
        MemoryBank { inner }
    }

    fn groups(&self) -> GroupTable {
        let inner = match &self.inner {
            AnyCheckpoint::F32(c) => c.state.groups.clone(),
            AnyCheckpoint::F64(c) => c.state.groups.clone(),
        };
        GroupTable { inner }
    }
}

/// Softmax over every bank slot of `bank·f / tau`.
#[pyfunction]
fn instance_probs(f: Vec<f64>, bank: &MemoryBank, tau: f64) -> PyResult<Vec<f64>> {
    memdisc::losses::instance_probs(&f, &bank.inner, tau)
        .map(|p| p.0)
        .map_err(value_err)
}

/// Mean cross-entropy over `len(instances)·k` instance-major feature rows.
#[pyfunction]
fn batch_ce(
    feats: Vec<Vec<f64>>,
    instances: Vec<usize>,
    k: usize,
    groups: &GroupTable,
    bank: &MemoryBank,
    tau: f64,
) -> PyResult<f64> {
    let (flat, _) = flatten(feats)?;
    memdisc::losses::batch_ce(&flat, &instances, k, &groups.inner, &bank.inner, tau).map_err(value_err)
}

/// Sum of KL divergences over ordered pairs of probability rows.
#[pyfunction]
fn kl_consistency(rows: Vec<Vec<f64>>) -> f64 {
    let rows: Vec<_> = rows.into_iter().map(memdisc::losses::ProbRow).collect();
    memdisc::losses::kl_consistency(&rows)
}

/// Sum of squared distances over unordered pairs of feature rows.
#[pyfunction]
fn l2_consistency(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let (flat, dim) = flatten(rows)?;
    Ok(memdisc::losses::l2_consistency(&flat, dim))
}

/// One merge stage; mutates `bank` and returns the new groups and a report.
#[pyfunction]
#[pyo3(signature = (bank, groups, sigma=None, target=(0.05, 0.10), neighbors=10, safety_cap=0.5))]
fn merge<'py>(
    py: Python<'py>,
    bank: &mut MemoryBank,
    groups: &GroupTable,
    sigma: Option<f64>,
    target: (f64, f64),
    neighbors: usize,
    safety_cap: f64,
) -> PyResult<(GroupTable, Bound<'py, PyAny>)> {
    let cfg = MergeConfig {
        sigma,
        target_fraction: target,
        neighbors,
        safety_cap,
        ..MergeConfig::default()
    };
    let (inner, report) = memdisc::mining::merge_stage(&mut bank.inner, &groups.inner, &cfg).map_err(value_err)?;
    Ok((GroupTable { inner }, to_py(py, &report)?))
}

/// `(sigma, grouped_fraction, reached)` for the target interval.
#[pyfunction]
#[pyo3(signature = (bank, groups, target=(0.05, 0.10), neighbors=10))]
fn calibrate_sigma(bank: &MemoryBank, groups: &GroupTable, target: (f64, f64), neighbors: usize) -> PyResult<(f64, f64, bool)> {
    let c = memdisc::mining::calibrate_sigma(&bank.inner, &groups.inner, target, neighbors).map_err(value_err)?;
    Ok((c.sigma, c.grouped_fraction, c.reached))
}

/// Weighted kNN predictions for each query row.
#[pyfunction]
#[pyo3(signature = (train, labels, queries, k=200, temperature=0.1))]
fn knn_classify(train: Vec<Vec<f64>>, labels: Vec<usize>, queries: Vec<Vec<f64>>, k: usize, temperature: f64) -> PyResult<Vec<usize>> {
    let (train, dim) = flatten(train)?;
    let (queries, qdim) = flatten(queries)?;
    if dim != qdim {
        return Err(PyValueError::new_err("train and query rows differ in length"));
    }
    memdisc::evaluate::knn_classify(&train, &labels, &queries, dim, k, temperature)
        .map(|r| r.predictions)
        .map_err(value_err)
}

/// `[(k, R@k)]`, the query itself excluded and `k` capped at `n - 1`.
#[pyfunction]
fn recall_at_k(feats: Vec<Vec<f64>>, labels: Vec<usize>, ks: Vec<usize>) -> PyResult<Vec<(usize, f64)>> {
    let (flat, dim) = flatten(feats)?;
    memdisc::evaluate::recall_at_k(&flat, &labels, dim, &ks)
        .map(|r| r.recalls)
        .map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (feats, labels, seed=0))]
fn nmi(feats: Vec<Vec<f64>>, labels: Vec<usize>, seed: u64) -> PyResult<f64> {
    let (flat, dim) = flatten(feats)?;
    memdisc::evaluate::nmi(&flat, &labels, dim, seed).map_err(value_err)
}

/// `(pixels, labels)` from CIFAR-10 binary records.
#[pyfunction]
fn parse_cifar10(data: &[u8]) -> PyResult<(Vec<f32>, Vec<usize>)> {
    memdisc::data::parse_cifar10(std::path::Path::new("<bytes>"), data).map_err(value_err)
}

fn train_any<T: Real>(cfg: &CoreConfig) -> Result<(AnyCheckpoint, Vec<MetricsRow>), memdisc::train::TrainError>
where
    CoreCheckpoint<T>: Into<AnyCheckpoint>,
{
    let (data, test) = load_data(cfg)?;
    let monitor = test.as_ref().map(|t| Monitor {
        train_labels: &data.labels,
        test: t,
    });
    let mut state = TrainState::<T>::init(cfg, data.len())?;
    let mut rows = Vec::new();
    core_train(&mut state, cfg, &data.images, monitor.as_ref(), &mut rows)?;
    let ckpt = CoreCheckpoint {
        config: cfg.clone(),
        state,
    };
    Ok((ckpt.into(), rows))
}

/// Trains a fresh model; returns the checkpoint and the per-epoch metrics.
#[pyfunction]
fn train<'py>(py: Python<'py>, config: &TrainConfig) -> PyResult<(Checkpoint, Bound<'py, PyAny>)> {
    let cfg = config.inner.clone();
    let result = py.detach(|| match cfg.precision {
        Precision::F32 => train_any::<f32>(&cfg),
        Precision::F64 => train_any::<f64>(&cfg),
    });
    let (inner, rows) = result.map_err(value_err)?;
    Ok((Checkpoint { inner }, to_py(py, &rows)?))
}

/// Runs an ablation suite (`table1`, `table2`, `table4` or `table5`).
#[pyfunction]
#[pyo3(signature = (suite, seeds=vec![0, 1, 2], config=None))]
fn ablate<'py>(py: Python<'py>, suite: &str, seeds: Vec<u64>, config: Option<&TrainConfig>) -> PyResult<Bound<'py, PyAny>> {
    let suite: Suite = suite.parse().map_err(PyValueError::new_err)?;
    let base = match config {
        Some(c) => c.inner.clone(),
        None if suite == Suite::Table5 => experiments::duplicate_config(),
        None => experiments::desk_config(),
    };
    let result = py.detach(|| match base.precision {
        Precision::F32 => experiments::run_suite::<f32>(suite, &base, &seeds, &mut memdisc::metrics::NullSink),
        Precision::F64 => experiments::run_suite::<f64>(suite, &base, &seeds, &mut memdisc::metrics::NullSink),
    });
    to_py(py, &result.map_err(value_err)?)
}

#[pymodule]
#[pyo3(name = "memdisc")]
fn memdisc_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<TrainConfig>()?;
    m.add_class::<MemoryBank>()?;
    m.add_class::<GroupTable>()?;
    m.add_class::<Checkpoint>()?;
    m.add_function(wrap_pyfunction!(instance_probs, m)?)?;
    m.add_function(wrap_pyfunction!(batch_ce, m)?)?;
    m.add_function(wrap_pyfunction!(kl_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(l2_consistency, m)?)?;
    m.add_function(wrap_pyfunction!(merge, m)?)?;
    m.add_function(wrap_pyfunction!(calibrate_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(knn_classify, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(parse_cifar10, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(ablate, m)?)?;
    Ok(())
}

//! Python bindings. Matrices cross the boundary as lists of rows (numpy
//! arrays are accepted as input); records come back as dicts.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyList, PyString};
use serde::Serialize;
use serde_json::Value;

use fairtensor::audit::{self, AuditConfig};
use fairtensor::datasets::{self, gen_synthetic, LabeledDataset, SyntheticSpec};
use fairtensor::experiment::{self, DatasetConfig, ExperimentConfig, Method, Overrides, PointResult, RunOutcome};
use fairtensor::kernel::{self, KernelConfig};
use fairtensor::{tensor, Error, FactorModel, Mat, Observed, Tensor3};

create_exception!(fairtensor_py, FairTensorError, PyValueError);

fn err(e: Error) -> PyErr {
    FairTensorError::new_err(e.to_string())
}

fn mat(rows: Vec<Vec<f64>>) -> PyResult<Mat> {
    Mat::from_rows(&rows).map_err(err)
}

fn rows(m: &Mat) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

#[derive(FromPyObject)]
enum ArrayIn {
    Tensor(Vec<Vec<Vec<f64>>>),
    Matrix(Vec<Vec<f64>>),
}

impl ArrayIn {
    fn into_observed(self) -> PyResult<Observed> {
        match self {
            ArrayIn::Matrix(m) => Ok(Observed::Matrix(mat(m)?)),
            ArrayIn::Tensor(t) => {
                let (i, j) = (t.len(), t.first().map_or(0, Vec::len));
                let k = t.first().and_then(|s| s.first()).map_or(0, Vec::len);
                let values: Vec<f64> = t.into_iter().flatten().flatten().collect();
                Ok(Observed::Tensor(Tensor3::new((i, j, k), values).map_err(err)?))
            }
        }
    }
}

fn observed_to_py<'py>(py: Python<'py>, x: &Observed) -> PyResult<Bound<'py, PyAny>> {
    match x {
        Observed::Matrix(m) => Ok(PyList::new(py, rows(m))?.into_any()),
        Observed::Tensor(t) => {
            let (i, j, k) = t.dims();
            let nested: Vec<Vec<Vec<f64>>> = (0..i)
                .map(|a| (0..j).map(|b| (0..k).map(|c| t.get(a, b, c)).collect()).collect())
                .collect();
            Ok(PyList::new(py, nested)?.into_any())
        }
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &Value) -> PyResult<Bound<'py, PyAny>> {
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => PyBool::new(py, *b).to_owned().into_any(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any(),
            (None, Some(i)) => i.into_pyobject(py)?.into_any(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => PyString::new(py, s).into_any(),
        Value::Array(items) => {
            let items = items.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any()
        }
        Value::Object(map) => {
            let d = PyDict::new(py);
            for (k, x) in map {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

/// Serializes a record into a dict. Non-finite floats become `None`.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let v = serde_json::to_value(value).map_err(|e| FairTensorError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn point_to_py<'py>(py: Python<'py>, p: &PointResult) -> PyResult<Bound<'py, PyAny>> {
    let d = to_py(py, &p.metrics)?;
    d.set_item("majority_floor", p.majority_floor)?;
    d.set_item("diverged", p.diverged.clone())?;
    Ok(d)
}

fn gamma(g: f64) -> PyResult<KernelConfig> {
    KernelConfig::new(g).map_err(err)
}

/// Observed data, sensitive matrix `s` and binary labels.
#[pyclass(name = "Dataset", module = "fairtensor_py", frozen)]
struct PyDataset {
    inner: LabeledDataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    #[pyo3(signature = (x, s, labels, provenance = "python"))]
    fn new(x: ArrayIn, s: Vec<Vec<f64>>, labels: Vec<u8>, provenance: &str) -> PyResult<Self> {
        let inner = LabeledDataset::new(x.into_observed()?, mat(s)?, labels, provenance).map_err(err)?;
        Ok(Self { inner })
    }

    /// Two-population synthetic CP tensor.
    #[staticmethod]
    #[pyo3(signature = (small = true, seed = 0))]
    fn synthetic(small: bool, seed: u64) -> PyResult<Self> {
        let spec = if small { SyntheticSpec::small(seed) } else { SyntheticSpec::full(seed) };
        Ok(Self { inner: gen_synthetic(&spec).map_err(err)?.data })
    }

    /// The contraceptive-method-choice table; `path` defaults to the bundled copy.
    #[staticmethod]
    #[pyo3(signature = (path = None, drop_sensitive = false))]
    fn contraceptive(path: Option<PathBuf>, drop_sensitive: bool) -> PyResult<Self> {
        let cfg = DatasetConfig::Contraceptive { path, drop_sensitive };
        Ok(Self { inner: cfg.load(0).map_err(err)? })
    }

    #[staticmethod]
    fn counterexample() -> Self {
        Self { inner: datasets::counterexample_dataset() }
    }

    /// A dataset by name (`synthetic`, `synthetic-small`, `contraceptive`,
    /// `counterexample`) or a directory written by `save`.
    #[staticmethod]
    #[pyo3(signature = (name, seed = 0))]
    fn load(name: &str, seed: u64) -> PyResult<Self> {
        let cfg = DatasetConfig::from_name(name).map_err(err)?;
        Ok(Self { inner: cfg.load(seed).map_err(err)? })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        experiment::save_dataset_dir(dir, &self.inner).map_err(err)
    }

    #[getter]
    fn x<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        observed_to_py(py, &self.inner.x)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.x.shape()
    }

    #[getter]
    fn s(&self) -> Vec<Vec<f64>> {
        rows(&self.inner.s)
    }

    #[getter]
    fn labels(&self) -> Vec<u32> {
        // a Vec<u8> would come back as `bytes`
        self.inner.labels.iter().map(|&l| l as u32).collect()
    }

    #[getter]
    fn provenance(&self) -> String {
        self.inner.provenance.clone()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }

    fn __repr__(&self) -> String {
        format!("Dataset(shape={:?}, provenance={:?})", self.inner.x.shape(), self.inner.provenance)
    }
}

/// A fitted model with its trace, audit and metrics.
#[pyclass(name = "FitResult", module = "fairtensor_py", frozen)]
struct PyFitResult {
    outcome: RunOutcome,
}

#[pymethods]
impl PyFitResult {
    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        rows(&self.outcome.fit.model.a)
    }

    #[getter]
    fn b(&self) -> Vec<Vec<f64>> {
        rows(&self.outcome.fit.model.b)
    }

    #[getter]
    fn c(&self) -> Option<Vec<Vec<f64>>> {
        self.outcome.fit.model.c.as_ref().map(rows)
    }

    #[getter]
    fn trace<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.outcome.fit.trace.records)
    }

    #[getter]
    fn metrics<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.outcome.metrics)
    }

    #[getter]
    fn audit<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.outcome.audit)
    }

    /// Writes A.txt, B.txt and (3-mode) C.txt into `dir`.
    fn save(&self, dir: PathBuf) -> PyResult<()> {
        fairtensor::io::save_model(dir, &self.outcome.fit.model).map_err(err)
    }

    fn __repr__(&self) -> String {
        let m = &self.outcome.metrics;
        format!(
            "FitResult(method={}, lambda={}, relative_residual={:.4}, unfairness={:.3})",
            m.method, m.lambda, m.relative_residual, m.unfairness
        )
    }
}

/// A resolved experiment: dataset, training settings, methods and sweeps.
#[pyclass(name = "Experiment", module = "fairtensor_py", frozen)]
struct PyExperiment {
    cfg: ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(Self { cfg: ExperimentConfig::preset(name).map_err(err)? })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        let cfg = ExperimentConfig::from_toml(text).map_err(err)?;
        cfg.validate().map_err(err)?;
        Ok(Self { cfg })
    }

    #[staticmethod]
    fn preset_names() -> Vec<&'static str> {
        experiment::PRESET_NAMES.to_vec()
    }

    /// Returns a copy with command-line style overrides applied.
    #[pyo3(signature = (*, method = None, lam = None, epochs = None, inner_steps = None,
                        lr_a = None, lr_bc = None, seed = None, small = false))]
    #[allow(clippy::too_many_arguments)]
    fn with_overrides(
        &self,
        method: Option<&str>,
        lam: Option<f64>,
        epochs: Option<usize>,
        inner_steps: Option<usize>,
        lr_a: Option<f64>,
        lr_bc: Option<f64>,
        seed: Option<u64>,
        small: bool,
    ) -> PyResult<Self> {
        let method = method.map(str::parse::<Method>).transpose().map_err(err)?;
        let mut cfg = self.cfg.clone();
        cfg.apply(&Overrides { method, lambda: lam, epochs, inner_steps, lr_a, lr_bc, seed, small });
        cfg.validate().map_err(err)?;
        Ok(Self { cfg })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.cfg.to_toml().map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.cfg.name.clone()
    }

    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.cfg.seeds.clone()
    }

    /// Fits the first configured method on the first seed.
    fn fit(&self, py: Python<'_>) -> PyResult<PyFitResult> {
        let cfg = self.cfg.clone();
        let (_, _, outcome) = py.detach(move || experiment::fit_single(&cfg)).map_err(err)?;
        Ok(PyFitResult { outcome })
    }

    /// Every sweep point; diverged points carry `diverged` and `None` metrics.
    fn sweep<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyAny>>> {
        let cfg = self.cfg.clone();
        let rows = py.detach(move || experiment::sweep(&cfg)).map_err(err)?;
        rows.iter().map(|r| point_to_py(py, r)).collect()
    }

    /// `(rows, summary)`: per-run records and per-method mean/std summaries.
    #[allow(clippy::type_complexity)]
    fn compare<'py>(&self, py: Python<'py>) -> PyResult<(Vec<Bound<'py, PyAny>>, Vec<Bound<'py, PyAny>>)> {
        let cfg = self.cfg.clone();
        let report = py.detach(move || experiment::compare(&cfg)).map_err(err)?;
        let rows = report.rows.iter().map(|r| point_to_py(py, r)).collect::<PyResult<_>>()?;
        let summary = report.summary.iter().map(|s| to_py(py, s)).collect::<PyResult<_>>()?;
        Ok((rows, summary))
    }

    fn __repr__(&self) -> String {
        format!("Experiment({:?})", self.cfg.name)
    }
}

#[pyfunction]
#[pyo3(signature = (a, s, gamma_a = 1.0, gamma_s = 1.0))]
fn khsic(a: Vec<Vec<f64>>, s: Vec<Vec<f64>>, gamma_a: f64, gamma_s: f64) -> PyResult<f64> {
    kernel::khsic(&mat(a)?, &mat(s)?, gamma(gamma_a)?, gamma(gamma_s)?).map_err(err)
}

/// Centered kernel alignment between the RBF Grams of `a` and `s`.
#[pyfunction]
#[pyo3(signature = (a, s, gamma_a = 1.0, gamma_s = 1.0))]
fn normalized_khsic(a: Vec<Vec<f64>>, s: Vec<Vec<f64>>, gamma_a: f64, gamma_s: f64) -> PyResult<f64> {
    kernel::normalized_khsic(&mat(a)?, &mat(s)?, gamma(gamma_a)?, gamma(gamma_s)?).map_err(err)
}

#[pyfunction]
fn hsic_linear(a: Vec<Vec<f64>>, s: Vec<Vec<f64>>) -> PyResult<f64> {
    kernel::hsic_linear(&mat(a)?, &mat(s)?).map_err(err)
}

/// `||A^T S||_F^2`.
#[pyfunction]
fn fatr_orthogonality(a: Vec<Vec<f64>>, s: Vec<Vec<f64>>) -> PyResult<f64> {
    kernel::fatr_orthogonality(&mat(a)?, &mat(s)?).map_err(err)
}

fn model(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, c: Option<Vec<Vec<f64>>>) -> PyResult<FactorModel> {
    FactorModel::new(mat(a)?, mat(b)?, c.map(mat).transpose()?).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (a, b, c = None))]
fn reconstruct<'py>(
    py: Python<'py>,
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Option<Vec<Vec<f64>>>,
) -> PyResult<Bound<'py, PyAny>> {
    observed_to_py(py, &tensor::reconstruct(&model(a, b, c)?))
}

#[pyfunction]
#[pyo3(signature = (x, a, b, c = None))]
fn relative_residual(x: ArrayIn, a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, c: Option<Vec<Vec<f64>>>) -> PyResult<f64> {
    tensor::relative_residual(&x.into_observed()?, &model(a, b, c)?).map_err(err)
}

/// Trains the probe on `a` and reports test accuracy, unfairness and the
/// majority floor.
#[pyfunction]
#[pyo3(signature = (a, labels, seed = 0, epochs = None, train_fraction = None))]
fn unfairness<'py>(
    py: Python<'py>,
    a: Vec<Vec<f64>>,
    labels: Vec<u8>,
    seed: u64,
    epochs: Option<usize>,
    train_fraction: Option<f64>,
) -> PyResult<Bound<'py, PyAny>> {
    let defaults = AuditConfig::default();
    let cfg = AuditConfig {
        seed,
        epochs: epochs.unwrap_or(defaults.epochs),
        train_fraction: train_fraction.unwrap_or(defaults.train_fraction),
        ..defaults
    };
    let a = mat(a)?;
    let result = py.detach(move || audit::unfairness(&a, &labels, &cfg)).map_err(err)?;
    to_py(py, &result)
}

/// The orthogonal-yet-identifiable example and its checks.
#[pyfunction]
fn counterexample(py: Python<'_>) -> PyResult<Bound<'_, PyAny>> {
    to_py(py, &experiment::counterexample_report().map_err(err)?)
}

#[pyfunction]
fn spearman(x: Vec<f64>, y: Vec<f64>) -> Option<f64> {
    experiment::spearman(&x, &y)
}

#[pymodule]
pub fn fairtensor_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("FairTensorError", m.py().get_type::<FairTensorError>())?;
    m.add("METRICS_HEADER", experiment::METRICS_HEADER)?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyFitResult>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(khsic, m)?)?;
    m.add_function(wrap_pyfunction!(normalized_khsic, m)?)?;
    m.add_function(wrap_pyfunction!(hsic_linear, m)?)?;
    m.add_function(wrap_pyfunction!(fatr_orthogonality, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(relative_residual, m)?)?;
    m.add_function(wrap_pyfunction!(unfairness, m)?)?;
    m.add_function(wrap_pyfunction!(counterexample, m)?)?;
    m.add_function(wrap_pyfunction!(spearman, m)?)?;
    Ok(())
}

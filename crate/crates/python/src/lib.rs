//! Python bindings. Configs travel as TOML text, tables as CSV text and
//! reports as JSON text, in the same formats the command line tool writes.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use extrapolate_core::adapt::{adapt_entropy, entropy, AdaptConfig, AdaptedModel};
use extrapolate_core::estimator::{predict, EstimatorModel};
use extrapolate_core::harness::{self, AssumptionOptions, ExperimentConfig};
use extrapolate_core::metrics::{self, parse_mode, parse_task, summary_markdown, write_results_csv, SweepGrid};
use extrapolate_core::ndgrad::Tensor;
use extrapolate_core::rng::{stream_rng, Stream};
use extrapolate_core::synthgen::{self, build_generator, GeneratorSpec, Label, Labels};
use extrapolate_core::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Parse { .. } | Error::ShapeMismatch { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Ok(Tensor::matrix(rows.len(), cols, rows.concat()))
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

fn csv_string(write: impl FnOnce(&mut Vec<u8>) -> extrapolate_core::Result<()>) -> PyResult<String> {
    let mut buf = Vec::new();
    write(&mut buf).map_err(py_err)?;
    String::from_utf8(buf).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

fn json<T: serde::Serialize>(v: &T) -> PyResult<String> {
    serde_json::to_string_pretty(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Ground-truth generating process.
#[pyclass(name = "Generator", module = "extrapolate")]
#[derive(Clone)]
struct PyGenerator {
    inner: synthgen::Generator,
}

#[pymethods]
impl PyGenerator {
    #[new]
    #[pyo3(signature = (mode = "dense", task = "classification", seed = 0, scramble_outputs = false))]
    fn new(mode: &str, task: &str, seed: u64, scramble_outputs: bool) -> PyResult<Self> {
        let spec = GeneratorSpec {
            mode: parse_mode(mode).ok_or_else(|| PyValueError::new_err(format!("unknown mode `{mode}`")))?,
            task: parse_task(task).ok_or_else(|| PyValueError::new_err(format!("unknown task `{task}`")))?,
            scramble_outputs,
            seed,
            ..GeneratorSpec::default()
        };
        Ok(PyGenerator {
            inner: build_generator(&spec).map_err(py_err)?,
        })
    }

    #[getter]
    fn d_c(&self) -> usize {
        self.inner.spec().d_c
    }

    #[getter]
    fn d_s(&self) -> usize {
        self.inner.spec().d_s
    }

    #[getter]
    fn d_x(&self) -> usize {
        self.inner.spec().d_x
    }

    /// Observations for latent rows `z = [c, s]`.
    fn generate(&self, z: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.generate(&matrix(&z)?).map_err(py_err)?))
    }

    /// Jacobian of the generator at one latent point.
    fn jacobian(&self, z: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
        let j = self.inner.jacobian_at(&z).map_err(py_err)?;
        Ok((0..j.nrows()).map(|r| j.row(r).iter().copied().collect()).collect())
    }

    /// Source sample as a dict with keys `xs`, `labels`, `cs`, `ss`.
    #[pyo3(signature = (n, seed = 0))]
    fn sample_source<'py>(&self, py: Python<'py>, n: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let mut rng = stream_rng(seed, 0, 0, Stream::Source);
        let d = synthgen::sample_source(&self.inner, n, &mut rng).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("xs", rows(&d.xs))?;
        match d.labels {
            Labels::Class(y) => out.set_item("labels", y)?,
            Labels::Value(y) => out.set_item("labels", y)?,
        }
        out.set_item("cs", rows(&d.cs))?;
        out.set_item("ss", rows(&d.ss))?;
        Ok(out)
    }

    /// One target at `||s|| = distance` as a dict with keys `x`, `label`, `c`, `s`.
    #[pyo3(signature = (distance, seed = 0))]
    fn sample_target<'py>(&self, py: Python<'py>, distance: f64, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let mut rng = stream_rng(seed, 0, 0, Stream::Target);
        let t = synthgen::sample_target(&self.inner, distance, &mut rng).map_err(py_err)?;
        let out = PyDict::new(py);
        out.set_item("x", t.x)?;
        match t.label {
            Label::Class(k) => out.set_item("label", k)?,
            Label::Value(y) => out.set_item("label", y)?,
        }
        out.set_item("c", t.latent.c)?;
        out.set_item("s", t.latent.s)?;
        Ok(out)
    }

    /// Assumption report as JSON text.
    #[pyo3(signature = (distances = vec![], n_points = 20, seed = 0))]
    fn check_assumptions(&self, distances: Vec<f64>, n_points: usize, seed: u64) -> PyResult<String> {
        let opts = AssumptionOptions {
            n_points,
            seed,
            ..AssumptionOptions::default()
        };
        json(&harness::check_assumptions(&self.inner, &distances, &opts).map_err(py_err)?)
    }
}

/// Experiment configuration.
#[pyclass(name = "Config", module = "extrapolate")]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Parses TOML text; empty text gives the defaults.
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml_str(toml).map_err(py_err)?;
        inner.validate().map_err(py_err)?;
        Ok(PyConfig { inner })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(py_err)
    }

    #[getter]
    fn n_runs(&self) -> usize {
        self.inner.n_runs
    }

    #[getter]
    fn distances(&self) -> Vec<f64> {
        self.inner.distances.clone()
    }
}

/// Trained estimator.
#[pyclass(name = "Model", module = "extrapolate")]
#[derive(Clone)]
struct PyModel {
    inner: EstimatorModel,
}

#[pymethods]
impl PyModel {
    /// Trains the given run of a config, exactly as the matrix would.
    /// Returns `(model, target dict)`.
    #[staticmethod]
    #[pyo3(signature = (config, distance, run = 0))]
    fn train<'py>(py: Python<'py>, config: &PyConfig, distance: f64, run: u64) -> PyResult<(Self, Bound<'py, PyDict>)> {
        let cfg = config.inner.clone();
        let (r, fitted) = py
            .detach(move || {
                let r = harness::single_run(&cfg, distance, run)?;
                let f = harness::fit_single(&cfg, &r)?;
                Ok::<_, Error>((r, f))
            })
            .map_err(py_err)?;
        let t = PyDict::new(py);
        t.set_item("x", r.data.target.x.clone())?;
        match r.data.target.label {
            Label::Class(k) => t.set_item("label", k)?,
            Label::Value(y) => t.set_item("label", y)?,
        }
        t.set_item("kl", fitted.kl)?;
        Ok((PyModel { inner: fitted.outcome.model }, t))
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyModel {
            inner: EstimatorModel::from_json(text).map_err(py_err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    /// Class indices for classification models, values for regression.
    fn predict(&self, py: Python<'_>, xs: Vec<Vec<f64>>) -> PyResult<Py<PyAny>> {
        let p = predict(&self.inner, &matrix(&xs)?).map_err(py_err)?;
        Ok(match self.inner.task {
            synthgen::Task::Classification => p.classes().into_pyobject(py)?.into_any().unbind(),
            synthgen::Task::Regression => p.values().into_pyobject(py)?.into_any().unbind(),
        })
    }

    /// Invariant codes (posterior means of `c`).
    fn codes(&self, xs: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        Ok(rows(&self.inner.encode(&matrix(&xs)?).map_err(py_err)?.mu_c))
    }

    /// Mean prediction entropy over the rows of `xs`.
    fn entropy(&self, xs: Vec<Vec<f64>>) -> PyResult<f64> {
        let p = predict(&self.inner, &matrix(&xs)?).map_err(py_err)?;
        Ok(entropy(&p.outputs))
    }

    /// Block-identifiability score and degenerate flag on fresh source pairs.
    #[pyo3(signature = (generator, n_pairs = 2000, seed = 0))]
    fn block_id_score(&self, generator: &PyGenerator, n_pairs: usize, seed: u64) -> PyResult<(f64, bool)> {
        let mut rng = stream_rng(seed, 0, 0, Stream::Eval);
        let s = metrics::block_identifiability_score(&self.inner, &generator.inner, n_pairs, &mut rng).map_err(py_err)?;
        Ok((s.score, s.degenerate))
    }

    /// Entropy adaptation on one target observation.
    #[pyo3(signature = (x, steps = 1, lr = 2e-3, mask = false, l1_weight = 0.0))]
    fn adapt(&self, x: Vec<f64>, steps: usize, lr: f64, mask: bool, l1_weight: f64) -> PyResult<PyAdapted> {
        let cfg = AdaptConfig {
            steps,
            lr,
            use_mask: mask,
            l1_weight,
            ..AdaptConfig::default()
        };
        cfg.validate().map_err(py_err)?;
        let out = adapt_entropy(&self.inner, &x, &cfg).map_err(py_err)?;
        Ok(PyAdapted {
            inner: out.adapted,
            entropies: out.entropies,
        })
    }
}

/// Model after entropy adaptation.
#[pyclass(name = "AdaptedModel", module = "extrapolate")]
struct PyAdapted {
    inner: AdaptedModel,
    #[pyo3(get)]
    entropies: Vec<f64>,
}

#[pymethods]
impl PyAdapted {
    fn predict(&self, xs: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        self.inner.predict_classes(&matrix(&xs)?).map_err(py_err)
    }

    /// Soft mask values, if a mask was learned.
    fn mask(&self) -> Option<Vec<f64>> {
        self.inner.masked_head.as_ref().map(|h| h.mask.values())
    }
}

/// Runs every cell of a config. Returns `(results CSV, summary markdown)`.
#[pyfunction]
fn run_matrix(py: Python<'_>, config: &PyConfig) -> PyResult<(String, String)> {
    let cfg = config.inner.clone();
    let rep = py.detach(move || harness::run_matrix(&cfg)).map_err(py_err)?;
    Ok((csv_string(|b| write_results_csv(&rep.results, b))?, summary_markdown(&rep.summary)))
}

/// Severity x scope sweep. Returns `(grid CSV, results CSV)`.
#[pyfunction]
fn severity_scope_sweep(py: Python<'_>, config: &PyConfig) -> PyResult<(String, String)> {
    let cfg = config.inner.clone();
    let rep = py.detach(move || harness::severity_scope_sweep(&cfg)).map_err(py_err)?;
    Ok((csv_string(|b| rep.grid.write_csv(b))?, csv_string(|b| write_results_csv(&rep.results, b))?))
}

/// SVG chart of a grid CSV.
#[pyfunction]
fn emit_plot(grid_csv: &str) -> PyResult<String> {
    harness::emit_plot(&SweepGrid::read_csv(grid_csv.as_bytes()).map_err(py_err)?).map_err(py_err)
}

#[pymodule]
fn extrapolate(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGenerator>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyAdapted>()?;
    m.add_function(wrap_pyfunction!(run_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(severity_scope_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(emit_plot, m)?)?;
    Ok(())
}

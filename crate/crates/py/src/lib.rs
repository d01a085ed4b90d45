//! Python bindings: dataset generation and IO, training, evaluation, and
//! neighbor mining, mirroring the CLI surface.

use std::collections::BTreeSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use gcd_core::config::ExperimentConfig;
use gcd_core::dataset::{self, FileFormat, GcdDataset, GenConfig};
use gcd_core::error::GcdError;
use gcd_core::eval::{self, GcdMetrics};
use gcd_core::mining;
use gcd_core::model::{self, ModelParams};
use gcd_core::numeric::{self, Mat64};
use gcd_core::rng::Rng;
use gcd_core::trainer;

fn to_py_err(e: GcdError) -> PyErr {
    match e {
        GcdError::Io(_) | GcdError::Csv(_) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_format(format: &str) -> PyResult<FileFormat> {
    format.parse::<FileFormat>().map_err(to_py_err)
}

fn matrix_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Mat64> {
    Mat64::from_rows(&rows).map_err(to_py_err)
}

fn metrics_dict<'py>(py: Python<'py>, m: &GcdMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("all", m.all)?;
    d.set_item("old", m.old)?;
    d.set_item("new", m.new)?;
    d.set_item("n_old", m.n_old)?;
    d.set_item("n_new", m.n_new)?;
    d.set_item("n_excluded", m.n_excluded)?;
    d.set_item("permutation", m.permutation.clone())?;
    Ok(d)
}

/// A category-discovery dataset: points with partial labels where labels
/// exist only for a subset of the old classes.
#[pyclass(name = "Dataset", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: GcdDataset,
}

#[pymethods]
impl PyDataset {
    /// Load a dataset file (format: "csv", "jsonl" or "bin").
    #[staticmethod]
    fn load(path: PathBuf, format: &str) -> PyResult<Self> {
        let inner = dataset::load_embeddings(&path, parse_format(format)?).map_err(to_py_err)?;
        Ok(PyDataset { inner })
    }

    fn save(&self, path: PathBuf, format: &str) -> PyResult<()> {
        dataset::save_embeddings(&self.inner, &path, parse_format(format)?).map_err(to_py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn k_total(&self) -> usize {
        self.inner.k_total
    }

    #[getter]
    fn old_classes(&self) -> Vec<u32> {
        self.inner.old_classes.iter().copied().collect()
    }

    fn labels(&self) -> Vec<i32> {
        self.inner.true_labels.clone()
    }

    fn labeled_mask(&self) -> Vec<bool> {
        self.inner.labeled_mask.clone()
    }

    fn points(&self) -> Vec<Vec<f64>> {
        (0..self.inner.len()).map(|i| self.inner.points.row(i).to_vec()).collect()
    }

    /// Row indices of the unlabeled split.
    fn unlabeled_indices(&self) -> Vec<usize> {
        self.inner.unlabeled_indices()
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n={}, dim={}, k_total={}, labeled={}, old={:?})",
            self.inner.len(),
            self.inner.dim(),
            self.inner.k_total,
            self.inner.labeled_indices().len(),
            self.inner.old_classes
        )
    }
}

/// A trained model: encoder, projection head, and prototype classifier.
#[pyclass(name = "Model")]
struct PyModel {
    params: ModelParams,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { params: model::load_checkpoint(&path).map_err(to_py_err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model::save_checkpoint(&self.params, &path).map_err(to_py_err)
    }

    /// Argmax cluster assignment for each row.
    fn predict(&self, points: Vec<Vec<f64>>) -> PyResult<Vec<usize>> {
        eval::predict(&self.params, &matrix_from_rows(points)?).map_err(to_py_err)
    }

    /// L2-normalized projected embeddings.
    fn embed(&self, points: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let cache = model::forward_single(&self.params, &matrix_from_rows(points)?).map_err(to_py_err)?;
        Ok((0..cache.z.rows()).map(|i| cache.z.row(i).to_vec()).collect())
    }

    /// Classifier probabilities at the given temperature.
    #[pyo3(signature = (points, tau = 0.1))]
    fn probabilities(&self, points: Vec<Vec<f64>>, tau: f64) -> PyResult<Vec<Vec<f64>>> {
        let cache = model::forward_single(&self.params, &matrix_from_rows(points)?).map_err(to_py_err)?;
        let probs = model::classify(&self.params, &cache.h, tau).map_err(to_py_err)?;
        Ok((0..probs.rows()).map(|i| probs.row(i).to_vec()).collect())
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_dim={}, hidden_dim={}, proj_dim={}, k_total={}, parameters={})",
            self.params.input_dim(),
            self.params.hidden_dim(),
            self.params.proj_dim(),
            self.params.k_total(),
            self.params.num_parameters()
        )
    }
}

/// Generate a synthetic Gaussian category-discovery problem.
#[pyfunction]
#[pyo3(signature = (k_total = 6, k_old = 3, dim = 16, n_per_class = 100, class_sep = 8.0, sigma = 1.0, labeled_ratio = 0.5, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn generate(
    k_total: usize,
    k_old: usize,
    dim: usize,
    n_per_class: usize,
    class_sep: f64,
    sigma: f64,
    labeled_ratio: f64,
    seed: u64,
) -> PyResult<PyDataset> {
    let cfg = GenConfig { k_total, k_old, dim, n_per_class, class_sep, sigma, labeled_ratio };
    let inner = dataset::gen_gaussian_gcd(&cfg, &Rng::new(seed)).map_err(to_py_err)?;
    Ok(PyDataset { inner })
}

/// The full default experiment configuration as a JSON string.
#[pyfunction]
fn default_config() -> PyResult<String> {
    ExperimentConfig::default().to_json_pretty().map_err(to_py_err)
}

/// Train on a dataset. `config_json` is a full experiment configuration
/// (see `default_config()`); `seed` overrides its seed field. Returns
/// `(model, metrics)` where metrics are computed on the unlabeled split.
#[pyfunction]
#[pyo3(signature = (dataset, config_json = None, seed = None))]
fn train<'py>(
    py: Python<'py>,
    dataset: &PyDataset,
    config_json: Option<&str>,
    seed: Option<u64>,
) -> PyResult<(PyModel, Bound<'py, PyDict>)> {
    let mut cfg = match config_json {
        Some(text) => ExperimentConfig::from_json(text).map_err(to_py_err)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let outcome = trainer::train(&dataset.inner, &cfg.settings()).map_err(to_py_err)?;
    let unlabeled = dataset.inner.unlabeled_indices();
    let points = dataset.inner.points.select_rows(&unlabeled);
    let truth: Vec<i32> = unlabeled.iter().map(|&i| dataset.inner.true_labels[i]).collect();
    let pred = eval::predict(&outcome.params, &points).map_err(to_py_err)?;
    let metrics = eval::gcd_accuracy(&pred, &truth, &dataset.inner.old_classes).map_err(to_py_err)?;
    Ok((PyModel { params: outcome.params }, metrics_dict(py, &metrics)?))
}

/// Clustering accuracy of predictions against ground truth (-1 rows are
/// excluded), split into all/old/new classes.
#[pyfunction]
fn evaluate<'py>(
    py: Python<'py>,
    pred: Vec<usize>,
    truth: Vec<i32>,
    old_classes: Vec<u32>,
) -> PyResult<Bound<'py, PyDict>> {
    let old: BTreeSet<u32> = old_classes.into_iter().collect();
    let metrics = eval::gcd_accuracy(&pred, &truth, &old).map_err(to_py_err)?;
    metrics_dict(py, &metrics)
}

/// k-reciprocal neighbor sets over row embeddings (cosine distance).
#[pyfunction]
fn mine_reciprocal(points: Vec<Vec<f64>>, k: usize) -> PyResult<Vec<Vec<usize>>> {
    let m = matrix_from_rows(points)?;
    let lists = mining::knn(&m, k).map_err(to_py_err)?;
    Ok(mining::k_reciprocal(&lists))
}

/// Temperature softmax over a logit vector.
#[pyfunction]
fn softmax(logits: Vec<f64>, tau: f64) -> PyResult<Vec<f64>> {
    numeric::softmax_temp(&logits, tau).map_err(to_py_err)
}

/// Shannon entropy (nats) of a probability vector.
#[pyfunction]
fn entropy(p: Vec<f64>) -> PyResult<f64> {
    numeric::entropy(&p).map_err(to_py_err)
}

/// Cosine distance between two vectors.
#[pyfunction]
fn cosine_distance(u: Vec<f64>, v: Vec<f64>) -> PyResult<f64> {
    numeric::cosine_distance(&u, &v).map_err(to_py_err)
}

#[pymodule]
fn gcdlib(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(mine_reciprocal, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_distance, m)?)?;
    Ok(())
}

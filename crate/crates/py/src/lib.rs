//! Python bindings: configs, synthetic datasets, training, embeddings and metrics.

use std::collections::HashMap;
use std::path::PathBuf;

use mixer_core::checkpoint::Checkpoint;
use mixer_core::config::RunConfig;
use mixer_core::grad_report::run_grad_check;
use mixer_core::io::DatasetFiles;
use mixer_core::model::MixerModel;
use mixer_core::pipeline::build_dataset;
use mixer_core::retrieval_eval::evaluate;
use mixer_core::MixerError;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

pub mod convert;

fn py_err(e: MixerError) -> PyErr {
    if e.is_io() {
        PyOSError::new_err(e.to_string())
    } else {
        PyValueError::new_err(e.to_string())
    }
}

/// A full run configuration.
#[pyclass(name = "RunConfig", module = "mixer")]
pub struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::from_toml(toml).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyRunConfig {
            inner: RunConfig::load(&path).map_err(py_err)?,
        })
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.model.d
    }
}

/// Organized training samples, held-out split and judgments.
#[pyclass(name = "Dataset", module = "mixer")]
pub struct PyDataset {
    inner: DatasetFiles,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn build(config: &PyRunConfig) -> PyResult<Self> {
        Ok(PyDataset {
            inner: build_dataset(&config.inner).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(PyDataset {
            inner: DatasetFiles::load(&dir).map_err(py_err)?,
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.inner.save(&dir).map_err(py_err)
    }

    #[getter]
    fn num_samples(&self) -> usize {
        self.inner.samples.len()
    }

    #[getter]
    fn num_test_samples(&self) -> usize {
        self.inner.test_samples.len()
    }

    #[getter]
    fn final_ids(&self) -> usize {
        self.inner.organization.final_ids
    }

    /// `(raw features, tokens)` of every held-out doc.
    fn test_docs(&self) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
        convert::docs_of(&self.inner.test_samples)
    }

    /// Raw features of every held-out query.
    fn test_queries(&self) -> Vec<Vec<f64>> {
        convert::queries_of(&self.inner.test_samples)
    }
}

/// A two-tower model.
#[pyclass(name = "Model", module = "mixer")]
pub struct PyModel {
    inner: MixerModel,
    final_hash: Option<String>,
}

#[pymethods]
impl PyModel {
    /// Freshly initialized model for `config.model`.
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: &PyRunConfig, seed: u64) -> PyResult<Self> {
        Ok(PyModel {
            inner: MixerModel::new(config.inner.model.clone(), seed).map_err(py_err)?,
            final_hash: None,
        })
    }

    /// Model stored in a training checkpoint.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = Checkpoint::load(&path).map_err(py_err)?;
        Ok(PyModel {
            inner: ck.model,
            final_hash: None,
        })
    }

    fn embed_queries(&self, raws: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&[f64]> = raws.iter().map(Vec::as_slice).collect();
        Ok(convert::to_rows(&self.inner.embed_queries(&refs).map_err(py_err)?))
    }

    fn embed_docs(&self, raws: Vec<Vec<f64>>, tokens: Vec<Vec<usize>>) -> PyResult<Vec<Vec<f64>>> {
        let refs: Vec<&[f64]> = raws.iter().map(Vec::as_slice).collect();
        Ok(convert::to_rows(&self.inner.embed_docs(&refs, &tokens).map_err(py_err)?))
    }

    /// Held-out metrics on `dataset`.
    fn evaluate(&self, dataset: &PyDataset) -> PyResult<HashMap<String, f64>> {
        let d = &dataset.inner;
        let report = evaluate(&self.inner, &d.test_samples, &d.judgments).map_err(py_err)?;
        Ok(convert::summary_map(&report.summary))
    }

    /// Parameter hash after training; `None` for untrained models.
    #[getter]
    fn final_hash(&self) -> Option<String> {
        self.final_hash.clone()
    }
}

/// Runs the configured curriculum on `dataset` and returns the trained model.
#[pyfunction]
fn train(config: &PyRunConfig, dataset: &PyDataset) -> PyResult<PyModel> {
    let (state, hash) = convert::train_model(&config.inner, &dataset.inner).map_err(py_err)?;
    Ok(PyModel {
        inner: state.model,
        final_hash: Some(hash),
    })
}

/// Margin loss of unit embeddings `z` against unit proxies `w`.
#[pyfunction]
#[pyo3(signature = (z, w, labels, scale = 64.0, margin = 0.5))]
fn margin_loss(z: Vec<Vec<f64>>, w: Vec<Vec<f64>>, labels: Vec<usize>, scale: f64, margin: f64) -> PyResult<f64> {
    convert::full_margin_loss(&z, &w, &labels, scale, margin).map_err(py_err)
}

/// `(group, parameters, max relative error, passed)` per parameter group.
#[pyfunction]
fn grad_check(config: &PyRunConfig) -> PyResult<Vec<(String, usize, f64, bool)>> {
    let report = run_grad_check(&config.inner.grad_check, None).map_err(py_err)?;
    Ok(report
        .groups
        .into_iter()
        .map(|g| (g.group, g.parameters, g.max_rel_err, g.passed))
        .collect())
}

#[pymodule]
fn mixer(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(margin_loss, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    Ok(())
}

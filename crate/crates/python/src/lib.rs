//! Python bindings: budget ranks, CP kernels, model accounting, gradient
//! checks and training runs. Structured results are returned as JSON strings.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use largo_core::ablation::run;
use largo_core::checkpoint::save_dataset;
use largo_core::config::Config;
use largo_core::datagen::generate;
use largo_core::diagnostics::gradcheck_spec;
use largo_core::eval::complexity_report as core_report;
use largo_core::kernels::{cp_init, cp_normalize, cp_rank_for_budget, tucker_rank_for_budget, LayerDims};
use largo_core::networks::{count_parameters, Model as CoreModel, ModelKind};
use largo_core::{Error, RngState};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_json(v: &impl serde::Serialize) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn kind_of(name: &str) -> PyResult<ModelKind> {
    match name {
        "hyper" => Ok(ModelKind::Hyper),
        "dedicated" => Ok(ModelKind::Dedicated),
        "single" => Ok(ModelKind::Single),
        _ => Err(PyValueError::new_err(format!("unknown model kind {name:?}"))),
    }
}

/// Largest CP rank whose factors fit the dense budget of one layer.
#[pyfunction]
fn cp_rank(m_count: usize, c_in: usize, c_out: usize, k_flat: usize) -> PyResult<usize> {
    let dims = LayerDims::new(m_count, c_in, c_out, k_flat).map_err(py_err)?;
    Ok(cp_rank_for_budget(&dims))
}

/// Largest Tucker rank whose factors and core fit the dense budget of one layer.
#[pyfunction]
fn tucker_rank(m_count: usize, c_in: usize, c_out: usize, k_flat: usize) -> PyResult<usize> {
    let dims = LayerDims::new(m_count, c_in, c_out, k_flat).map_err(py_err)?;
    tucker_rank_for_budget(&dims).map_err(py_err)
}

/// A CP-factorized kernel with a model-index mode.
#[pyclass(name = "CpKernel")]
struct PyCpKernel {
    inner: largo_core::kernels::CpKernel,
}

#[pymethods]
impl PyCpKernel {
    #[new]
    fn new(m_count: usize, c_in: usize, c_out: usize, k_flat: usize, rank: usize, seed: u64) -> PyResult<Self> {
        let dims = LayerDims::new(m_count, c_in, c_out, k_flat).map_err(py_err)?;
        let inner = cp_init(dims, rank, &mut RngState::new(seed)).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// `(M, C_in, C_out, K)`.
    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let d = &self.inner.dims;
        (d.m_count, d.c_in, d.c_out, d.k_flat)
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank
    }

    fn param_count(&self) -> usize {
        self.inner.param_count()
    }

    /// Kernel of model `m` (1-based), flattened `[C_in, C_out, K]`.
    fn slice(&self, m: usize) -> PyResult<Vec<f64>> {
        Ok(self.inner.reconstruct_slice(m).map_err(py_err)?.data().to_vec())
    }

    /// All kernels, flattened `[M, C_in, C_out, K]`.
    fn full(&self) -> Vec<f64> {
        self.inner.reconstruct_full().data().to_vec()
    }

    /// Copy with unit-norm `B`, `C`, `D` columns and the same kernels.
    fn normalized(&self) -> PyResult<Self> {
        Ok(Self {
            inner: cp_normalize(&self.inner).map_err(py_err)?,
        })
    }
}

/// A network family built from the `[network]` table of a TOML config.
#[pyclass(name = "Model")]
struct PyModel {
    inner: CoreModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, kind = "hyper"))]
    fn new(config: PathBuf, kind: &str) -> PyResult<Self> {
        let spec = Config::load_network(&config).map_err(py_err)?;
        let inner = CoreModel::new(&spec, kind_of(kind)?).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Parameter totals by group: total, stem, head, norm, inner.
    fn param_counts(&self) -> BTreeMap<String, usize> {
        let c = count_parameters(&self.inner);
        BTreeMap::from([
            ("total".into(), c.total),
            ("stem".into(), c.stem),
            ("head".into(), c.head),
            ("norm".into(), c.norm),
            ("inner".into(), c.inner),
        ])
    }

    /// Model indices served by the family.
    fn subsets(&self) -> Vec<usize> {
        self.inner.served_subsets()
    }

    fn spec_hash(&self) -> String {
        self.inner.hash()
    }
}

/// Hypernetwork vs single dense model accounting, as JSON.
#[pyfunction]
fn complexity_report(config: PathBuf) -> PyResult<String> {
    let spec = Config::load_network(&config).map_err(py_err)?;
    to_json(&core_report(&spec).map_err(py_err)?)
}

/// Finite-difference check of the hypernetwork's training gradient, as JSON.
#[pyfunction]
#[pyo3(signature = (config, seed = 7, coords_per_group = 50))]
fn gradcheck(config: PathBuf, seed: u64, coords_per_group: usize) -> PyResult<String> {
    let spec = Config::load_network(&config).map_err(py_err)?;
    to_json(&gradcheck_spec(&spec, seed, coords_per_group).map_err(py_err)?)
}

/// Trains the hypernetwork of a full config and returns `{"log", "report"}` as JSON.
#[pyfunction]
#[pyo3(signature = (config, seed = None, epochs = None))]
fn train(py: Python<'_>, config: PathBuf, seed: Option<u64>, epochs: Option<usize>) -> PyResult<String> {
    let mut cfg = Config::load(&config).map_err(py_err)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let r = py
        .detach(|| {
            let data = generate(&cfg.data)?;
            let model = CoreModel::new(&cfg.network, ModelKind::Hyper)?;
            run(model, &data, &cfg.train, |_| {})
        })
        .map_err(py_err)?;
    to_json(&serde_json::json!({ "log": r.log, "report": r.report.metrics_json() }))
}

/// Generates the `[data]` table's dataset and writes it to `out`.
#[pyfunction]
fn generate_dataset(config: PathBuf, out: PathBuf) -> PyResult<usize> {
    let cfg = Config::load(&config).map_err(py_err)?;
    let data = generate(&cfg.data).map_err(py_err)?;
    save_dataset(&out, &data).map_err(py_err)?;
    Ok(data.len())
}

#[pymodule]
fn largo(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(cp_rank, m)?)?;
    m.add_function(wrap_pyfunction!(tucker_rank, m)?)?;
    m.add_function(wrap_pyfunction!(complexity_report, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_class::<PyCpKernel>()?;
    m.add_class::<PyModel>()?;
    Ok(())
}

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ssm_surgeon::fixtures::{make_fixture, FixtureKind};
use ssm_surgeon::pipeline::{run_pipeline, CalibSpec, Method, RunConfig, Target};
use ssm_surgeon::ssm_prune::{self, ceil_count, obs_saliency_diag};
use ssm_surgeon::{eval, load_checkpoint, save_checkpoint, Pattern, ScoreMode};

fn value_err(e: ssm_surgeon::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr<Err = ssm_surgeon::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(value_err)
}

/// Dense row-major f64 tensor.
#[pyclass(name = "Tensor", module = "ssm_surgeon_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: ssm_surgeon::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, data, name = "tensor"))]
    fn new(shape: Vec<usize>, data: Vec<f64>, name: &str) -> PyResult<Self> {
        let inner = ssm_surgeon::Tensor::new(name, &shape, data).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn count_zeros(&self) -> usize {
        self.inner.count_zeros()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(name={:?}, shape={:?})", self.inner.name(), self.inner.shape())
    }
}

#[pyclass(name = "Model", module = "ssm_surgeon_py")]
struct PyModel {
    inner: ssm_surgeon::MambaModel,
}

#[pymethods]
impl PyModel {
    /// Seeded fixture, `kind` is "random" or "trained".
    #[staticmethod]
    #[pyo3(signature = (kind = "random", seed = 0))]
    fn fixture(py: Python<'_>, kind: &str, seed: u64) -> PyResult<Self> {
        let kind: FixtureKind = parse(kind)?;
        let inner = py.detach(|| make_fixture(kind, seed)).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = load_checkpoint(&path).map_err(value_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(value_err)
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.layers.len()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.config.vocab_size
    }

    #[getter]
    fn d_state(&self) -> usize {
        self.inner.config.d_state
    }

    fn a_log(&self, layer: usize) -> PyResult<PyTensor> {
        let l = self
            .inner
            .layers
            .get(layer)
            .ok_or_else(|| PyValueError::new_err(format!("layer {layer} out of range")))?;
        Ok(PyTensor { inner: l.a_log.clone() })
    }

    fn perplexity(&self, py: Python<'_>, corpus: Vec<Vec<u32>>) -> PyResult<f64> {
        py.detach(|| eval::perplexity(&self.inner, &corpus)).map_err(value_err)
    }
}

/// Run the pruning pipeline on a checkpoint directory and return the report JSON.
#[pyfunction]
#[pyo3(signature = (
    checkpoint, *, calib = "synthetic", nsamples = 64, seqlen = 64, seed = 0, sparsity = 0.5,
    alpha = 0.04, score = "simplified", pattern = "unstructured", target = "ssm", blocksize = 16,
    method = "sparsessm", report = None, out = None, verify = false
))]
#[allow(clippy::too_many_arguments)]
fn prune(
    py: Python<'_>,
    checkpoint: PathBuf,
    calib: &str,
    nsamples: usize,
    seqlen: usize,
    seed: u64,
    sparsity: f64,
    alpha: f64,
    score: &str,
    pattern: &str,
    target: &str,
    blocksize: usize,
    method: &str,
    report: Option<PathBuf>,
    out: Option<PathBuf>,
    verify: bool,
) -> PyResult<String> {
    let cfg = RunConfig {
        checkpoint,
        calib: parse::<CalibSpec>(calib)?,
        nsamples,
        seqlen,
        seed,
        sparsity,
        alpha,
        score: parse::<ScoreMode>(score)?,
        pattern: parse::<Pattern>(pattern)?,
        target: parse::<Target>(target)?,
        blocksize,
        method: parse::<Method>(method)?,
        report,
        out,
        verify,
    };
    let outcome = py
        .detach(|| run_pipeline(&cfg))
        .map_err(|e| PyRuntimeError::new_err(format!("{e} (exit code {})", e.exit_code())))?;
    outcome.report.to_json().map_err(value_err)
}

/// Number of entries pruned at fraction `p` of `total`.
#[pyfunction(name = "ceil_count")]
fn py_ceil_count(p: f64, total: usize) -> usize {
    ceil_count(p, total)
}

#[pyfunction(name = "obs_saliency_diag")]
fn py_obs_saliency_diag(w: f64, h_diag: f64) -> f64 {
    obs_saliency_diag(w, h_diag)
}

/// Keep-mask (1 = keep) removing the `ceil(p·numel)` lowest-scoring entries.
#[pyfunction]
fn mask_by_score(score: &PyTensor, p: f64) -> PyResult<PyTensor> {
    let m = ssm_prune::select_mask_by_score(&score.inner, p).map_err(value_err)?;
    Ok(PyTensor { inner: m.mask })
}

/// Magnitude keep-mask for an `A_log` tensor under `pattern`.
#[pyfunction]
#[pyo3(signature = (a_log, p, pattern = "unstructured"))]
fn magnitude_mask(a_log: &PyTensor, p: f64, pattern: &str) -> PyResult<PyTensor> {
    let m = ssm_prune::magnitude_mask(&a_log.inner, parse(pattern)?, p).map_err(value_err)?;
    Ok(PyTensor { inner: m.mask })
}

#[pymodule]
fn ssm_surgeon_py(_py: Python, m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(prune, m)?)?;
    m.add_function(wrap_pyfunction!(py_ceil_count, m)?)?;
    m.add_function(wrap_pyfunction!(py_obs_saliency_diag, m)?)?;
    m.add_function(wrap_pyfunction!(mask_by_score, m)?)?;
    m.add_function(wrap_pyfunction!(magnitude_mask, m)?)?;
    Ok(())
}

use pyo3::exceptions::{PyMemoryError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use superkernel::app::{run_suites, Suite};
use superkernel::attention::{self, AttentionConfig, AttentionParams, Variant};
use superkernel::{kernels, Error, KernelSpec, Precision};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::BudgetExceeded { .. } => PyMemoryError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn kernel_spec(kind: &str, sigma: f64, knots: Option<Vec<f64>>, degree: usize) -> PyResult<KernelSpec> {
    match kind {
        "linear" => Ok(KernelSpec::Linear),
        "gaussian" => KernelSpec::gaussian(sigma).map_err(py_err),
        "bspline" => {
            let knots = knots.ok_or_else(|| PyValueError::new_err("bspline kernel needs knots"))?;
            KernelSpec::bspline(knots, degree).map_err(py_err)
        }
        other => Err(PyValueError::new_err(format!("unknown kernel `{other}`"))),
    }
}

/// Dense row-major f64 tensor.
#[pyclass(name = "Tensor", module = "superkernel_py", skip_from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: superkernel::Tensor<f64>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        superkernel::Tensor::new(shape, data).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    #[pyo3(signature = (shape, seed=0, std=1.0))]
    fn randn(shape: Vec<usize>, seed: u64, std: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self { inner: superkernel::Tensor::randn(shape, std, &mut rng) }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    /// Flat row-major values.
    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Self> {
        self.inner.reshape(shape).map(|inner| Self { inner }).map_err(py_err)
    }

    fn max_abs_diff(&self, other: &PyTensor) -> PyResult<f64> {
        self.inner.max_abs_diff(&other.inner).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.inner.shape().first().copied().unwrap_or(1)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// One attention layer with randomly initialized parameters.
#[pyclass(name = "Attention", module = "superkernel_py")]
pub struct PyAttention {
    params: AttentionParams<f64>,
}

#[pymethods]
impl PyAttention {
    #[new]
    #[pyo3(signature = (variant, d_model, n_heads, seed=0, sigma=1.0, seq_len=None))]
    fn new(variant: &str, d_model: usize, n_heads: usize, seed: u64, sigma: f64, seq_len: Option<usize>) -> PyResult<Self> {
        let variant: Variant = variant.parse().map_err(py_err)?;
        let mut config = AttentionConfig::new(variant, d_model, n_heads).with_sigma(sigma);
        if let Some(s) = seq_len {
            config = config.with_seq_len(s);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AttentionParams::init(config, &mut rng).map(|params| Self { params }).map_err(py_err)
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.params.config.variant.name()
    }

    fn count_params(&self) -> usize {
        self.params.count()
    }

    /// `x` has shape (B, S, D).
    fn forward(&self, x: &PyTensor) -> PyResult<PyTensor> {
        attention::attention_forward(&self.params, &x.inner).map(|inner| PyTensor { inner }).map_err(py_err)
    }

    /// Row-stochastic attention maps, shape (B, heads, S, S).
    fn attention_maps(&self, x: &PyTensor) -> PyResult<PyTensor> {
        attention::attention_eval(&self.params, &x.inner).map(|o| PyTensor { inner: o.maps }).map_err(py_err)
    }

    /// Standard-attention parameters computing the same function as this
    /// pseudo layer.
    fn to_standard(&self) -> PyResult<PyAttention> {
        attention::pseudo_to_standard_embed(&self.params).map(|params| PyAttention { params }).map_err(py_err)
    }
}

#[pyfunction]
fn contract(a: &PyTensor, b: &PyTensor, spec: &str) -> PyResult<PyTensor> {
    superkernel::tensor::contract(&a.inner, &b.inner, spec).map(|inner| PyTensor { inner }).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (variant, d_model, n_heads, seq_len=None))]
fn count_params(variant: &str, d_model: usize, n_heads: usize, seq_len: Option<usize>) -> PyResult<usize> {
    let variant: Variant = variant.parse().map_err(py_err)?;
    let mut config = AttentionConfig::new(variant, d_model, n_heads);
    if let Some(s) = seq_len {
        config = config.with_seq_len(s);
    }
    config.validate().map_err(py_err)?;
    Ok(attention::count_params(&config))
}

#[pyfunction]
#[pyo3(signature = (kind, x, y, sigma=1.0, knots=None, degree=3))]
fn kernel_eval(kind: &str, x: f64, y: f64, sigma: f64, knots: Option<Vec<f64>>, degree: usize) -> PyResult<f64> {
    kernels::kernel_eval(&kernel_spec(kind, sigma, knots, degree)?, x, y).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (kind, d_head, sigma_w, trials=100_000, seed=0, sigma=1.0))]
fn variance_probe<'py>(
    py: Python<'py>,
    kind: &str,
    d_head: usize,
    sigma_w: f64,
    trials: usize,
    seed: u64,
    sigma: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let spec = kernel_spec(kind, sigma, None, 0)?;
    let r = attention::variance_probe(&spec, d_head, sigma_w, trials, seed).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("empirical_var", r.empirical_var)?;
    d.set_item("predicted_var", r.predicted_var)?;
    d.set_item("ratio", r.ratio)?;
    d.set_item("mu_k", r.mu_k)?;
    d.set_item("var_k", r.var_k)?;
    d.set_item("trials", r.trials)?;
    Ok(d)
}

/// Runs verification suites in memory. Returns `(suite, name, measured, pass)` rows.
#[pyfunction]
#[pyo3(signature = (suite="all", precision="f64", seed=0))]
fn verify(py: Python<'_>, suite: &str, precision: &str, seed: u64) -> PyResult<Vec<(String, String, f64, bool)>> {
    let suites = Suite::parse_selection(suite).map_err(py_err)?;
    let precision: Precision = precision.parse().map_err(py_err)?;
    let report = py.detach(|| run_suites(&suites, precision, seed)).map_err(py_err)?;
    Ok(report.checks.into_iter().map(|c| (c.suite.to_string(), c.name, c.measured, c.pass)).collect())
}

#[pymodule]
fn superkernel_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyAttention>()?;
    m.add_function(wrap_pyfunction!(contract, m)?)?;
    m.add_function(wrap_pyfunction!(count_params, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_eval, m)?)?;
    m.add_function(wrap_pyfunction!(variance_probe, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}

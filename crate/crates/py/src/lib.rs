//! Python bindings: fixture models, test-vector generation, detection, fault
//! injection and coverage campaigns.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileExistsError, PyIOError, PyValueError};
use pyo3::prelude::*;

use oneshot_core::faultlab::{self, FaultConfig, FaultKind};
use oneshot_core::harness::{self, Arch, CoverageReport};
use oneshot_core::netgraph::{self, ModelSpec, ParameterStore};
use oneshot_core::oneshot::{
    self as osc, GenConfig, GroundTruthMode, LossKind, OutputStats, Verdict,
};
use oneshot_core::{quantmap, Error, Tensor};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::Exists(_) => PyFileExistsError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse<T: std::str::FromStr>(what: &str, s: &str) -> PyResult<T> {
    s.parse()
        .map_err(|_| PyValueError::new_err(format!("unknown {what} {s:?}")))
}

fn kebab<T: serde::de::DeserializeOwned>(what: &str, s: &str) -> PyResult<T> {
    serde_json::from_value(serde_json::Value::from(s))
        .map_err(|_| PyValueError::new_err(format!("unknown {what} {s:?}")))
}

/// A network together with its parameters.
#[pyclass(module = "oneshot", frozen)]
struct Model {
    spec: ModelSpec,
    params: ParameterStore,
}

#[pymethods]
impl Model {
    /// Deterministic fixture model: arch is "mlp", "cnn" or "resnet-mini".
    #[staticmethod]
    #[pyo3(signature = (arch, classes, seed=0, trained=true))]
    fn toy(arch: &str, classes: usize, seed: u64, trained: bool) -> PyResult<Self> {
        let arch: Arch = parse("architecture", arch)?;
        let m = harness::make_toy_model(arch, classes, seed, trained).map_err(to_py)?;
        Ok(Self {
            spec: m.spec,
            params: m.params,
        })
    }

    #[staticmethod]
    fn load(spec_path: PathBuf, weights_path: PathBuf) -> PyResult<Self> {
        let (spec, params) = netgraph::load_model(spec_path, weights_path).map_err(to_py)?;
        Ok(Self { spec, params })
    }

    #[pyo3(signature = (spec_path, weights_path, overwrite=false))]
    fn save(&self, spec_path: PathBuf, weights_path: PathBuf, overwrite: bool) -> PyResult<()> {
        netgraph::save_model(&self.spec, &self.params, spec_path, weights_path, overwrite)
            .map_err(to_py)
    }

    #[getter]
    fn input_shape(&self) -> Vec<usize> {
        self.spec.input_shape.clone()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    #[getter]
    fn num_weights(&self) -> usize {
        self.params.num_weights()
    }

    /// Pre-softmax outputs for a flat, row-major input.
    fn logits(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = Tensor::new(self.spec.input_shape.clone(), x).map_err(to_py)?;
        Ok(netgraph::logits(&self.spec, &self.params, &x)
            .map_err(to_py)?
            .data()
            .to_vec())
    }

    /// The fault-free deployed model with int8-mapped weights.
    fn reference(&self) -> PyResult<Self> {
        Ok(Self {
            spec: self.spec.clone(),
            params: faultlab::reference_model(&self.params).map_err(to_py)?,
        })
    }

    /// One seeded faulty instance. Kinds: "multiplicative-variation",
    /// "additive-variation", "bit-flip", "level-flip".
    fn with_fault(&self, kind: &str, severity: f64, seed: u64) -> PyResult<Self> {
        let kind: FaultKind = kebab("fault kind", kind)?;
        let fault = FaultConfig {
            kind,
            severity,
            seed,
        };
        Ok(Self {
            spec: self.spec.clone(),
            params: faultlab::realize_faulty_model(&self.params, &fault).map_err(to_py)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(input_shape={:?}, num_classes={}, layers={})",
            self.spec.input_shape,
            self.spec.num_classes,
            self.spec.layers.len()
        )
    }
}

#[pyclass(module = "oneshot", frozen)]
struct TestVector {
    inner: osc::TestVector,
}

#[pymethods]
impl TestVector {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: osc::load_test_vector(path).map_err(to_py)?,
        })
    }

    #[pyo3(signature = (path, overwrite=false))]
    fn save(&self, path: PathBuf, overwrite: bool) -> PyResult<()> {
        osc::save_test_vector(&self.inner, path, overwrite).map_err(to_py)
    }

    #[getter]
    fn input(&self) -> Vec<f64> {
        self.inner.input.data().to_vec()
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.input.shape().to_vec()
    }

    #[getter]
    fn mu0(&self) -> f64 {
        self.inner.baseline.mu0
    }

    #[getter]
    fn sigma0(&self) -> f64 {
        self.inner.baseline.sigma0
    }

    #[getter]
    fn dkl0(&self) -> f64 {
        self.inner.baseline.dkl0
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn loss_history(&self) -> Vec<f64> {
        self.inner.loss_history.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "TestVector(shape={:?}, mu0={:e}, sigma0={}, dkl0={:e})",
            self.inner.input.shape(),
            self.inner.baseline.mu0,
            self.inner.baseline.sigma0,
            self.inner.baseline.dkl0
        )
    }
}

#[pyclass(module = "oneshot", frozen, get_all)]
struct Detection {
    mean: f64,
    std: f64,
    d_kl: f64,
    threshold: f64,
    faulty: bool,
}

#[pymethods]
impl Detection {
    #[getter]
    fn verdict(&self) -> &'static str {
        if self.faulty {
            "faulty"
        } else {
            "clean"
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "Detection(verdict={}, d_kl={:e})",
            self.verdict(),
            self.d_kl
        )
    }
}

#[pyclass(module = "oneshot", frozen)]
struct Coverage {
    inner: CoverageReport,
}

#[pymethods]
impl Coverage {
    fn csv(&self) -> String {
        self.inner.to_csv()
    }

    fn json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    /// Writes the CSV and a JSON twin; returns the JSON path.
    fn write(&self, path: PathBuf) -> PyResult<PathBuf> {
        self.inner.write(path).map_err(to_py)
    }

    /// Coverage in percent for one grid cell at one threshold.
    fn coverage(&self, kind: &str, severity: f64, threshold: f64) -> PyResult<f64> {
        let kind: FaultKind = kebab("fault kind", kind)?;
        self.inner
            .cells
            .iter()
            .find(|c| c.kind == kind && c.severity == severity)
            .and_then(|c| c.coverage_at(threshold))
            .ok_or_else(|| PyValueError::new_err("no such cell or threshold in the report"))
    }

    fn sweep(&self) -> String {
        harness::threshold_sweep(&self.inner).to_string()
    }
}

/// Learns a test vector for the int8-mapped version of `model`.
#[pyfunction]
#[pyo3(signature = (model, loss="moment", ground_truth="standardized-self", alpha0=0.1, iters=300, decay_every=100, seed=0))]
fn generate(
    model: &Model,
    loss: &str,
    ground_truth: &str,
    alpha0: f64,
    iters: usize,
    decay_every: usize,
    seed: u64,
) -> PyResult<TestVector> {
    let cfg = GenConfig {
        loss: kebab::<LossKind>("loss", loss)?,
        ground_truth: kebab::<GroundTruthMode>("ground truth", ground_truth)?,
        alpha0,
        iters,
        decay_every,
        seed,
        ..GenConfig::default()
    };
    let reference = faultlab::reference_model(&model.params).map_err(to_py)?;
    let inner = osc::generate_test_vector(&model.spec, &reference, &cfg).map_err(to_py)?;
    Ok(TestVector { inner })
}

/// One forward pass of the test vector through `model` as given.
#[pyfunction]
#[pyo3(signature = (model, tv, threshold=osc::DEFAULT_THRESHOLD))]
fn detect(model: &Model, tv: &TestVector, threshold: f64) -> PyResult<Detection> {
    let r = osc::detect(&model.spec, &model.params, &tv.inner, threshold).map_err(to_py)?;
    Ok(Detection {
        mean: r.stats.mean,
        std: r.stats.std,
        d_kl: r.d_kl,
        threshold: r.threshold,
        faulty: r.verdict == Verdict::Faulty,
    })
}

/// Divergence of N(mean, std^2) from the unit Gaussian.
#[pyfunction]
fn kl_divergence(mean: f64, std: f64) -> PyResult<f64> {
    if !(std > 0.0) {
        return Err(PyValueError::new_err("std must be positive"));
    }
    Ok(osc::kl_divergence(&OutputStats { mean, std, n: 0 }))
}

#[pyfunction]
fn kl_general(mu_hat: f64, sigma_hat: f64, mu: f64, sigma: f64) -> PyResult<f64> {
    osc::kl_general(mu_hat, sigma_hat, mu, sigma).map_err(to_py)
}

/// Symmetric int8 quantization of a flat weight list: `(levels, scale)`.
#[pyfunction]
fn quantize(weights: Vec<f64>) -> PyResult<(Vec<i8>, f64)> {
    let w = Tensor::from_vec(weights);
    let q = quantmap::quantize_int8(&w).map_err(to_py)?;
    Ok((q.levels().to_vec(), q.scale()))
}

/// Runs a campaign file; relative paths resolve against its directory.
#[pyfunction]
fn run_coverage(campaign: PathBuf) -> PyResult<Coverage> {
    Ok(Coverage {
        inner: harness::run_coverage(campaign).map_err(to_py)?,
    })
}

#[pyfunction]
fn forward_pass_count() -> u64 {
    netgraph::forward_pass_count()
}

#[pymodule]
fn oneshot(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_class::<TestVector>()?;
    m.add_class::<Detection>()?;
    m.add_class::<Coverage>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(detect, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(kl_general, m)?)?;
    m.add_function(wrap_pyfunction!(quantize, m)?)?;
    m.add_function(wrap_pyfunction!(run_coverage, m)?)?;
    m.add_function(wrap_pyfunction!(forward_pass_count, m)?)?;
    m.add("DEFAULT_THRESHOLDS", osc::DEFAULT_THRESHOLDS.to_vec())?;
    Ok(())
}

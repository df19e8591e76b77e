//! Python bindings: models, sampling, fitting, diagnostics, forecasts and
//! reference spectra. Arrays cross the boundary as nested lists.

use std::sync::Arc;

use genlearn_core::diagnostics;
use genlearn_core::forecaster;
use genlearn_core::oracle::{self, OracleSpectrum};
use genlearn_core::{CirModel, Error, LangevinModel, RbfKernel, SampleSet, SamplingMethod, SdeModel};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;

create_exception!(genlearn, GenlearnError, PyException, "Numerical failure inside genlearn-core.");

fn to_py(e: Error) -> PyErr {
    match e {
        Error::InvalidArgument(_) | Error::Domain { .. } | Error::MethodMismatch { .. } | Error::Config { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => GenlearnError::new_err(format!("[{}] {other}", other.module())),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn rows(m: faer::MatRef<'_, f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

/// A diffusion model preset.
#[pyclass(frozen, module = "genlearn")]
struct Model {
    inner: Arc<dyn SdeModel>,
    default_method: SamplingMethod,
}

#[pymethods]
impl Model {
    #[staticmethod]
    #[pyo3(signature = (kbt = 2.0))]
    fn four_well(kbt: f64) -> PyResult<Self> {
        Ok(Self { inner: Arc::new(LangevinModel::four_well(kbt).map_err(to_py)?), default_method: SamplingMethod::ExactInverseCdf })
    }

    #[staticmethod]
    #[pyo3(signature = (kbt = 2.0, energy_scale = 0.1))]
    fn muller_brown(kbt: f64, energy_scale: f64) -> PyResult<Self> {
        let m = LangevinModel::muller_brown(kbt, energy_scale).map_err(to_py)?;
        Ok(Self { inner: Arc::new(m), default_method: SamplingMethod::ExactInverseCdf })
    }

    #[staticmethod]
    #[pyo3(signature = (a = 1.0, b = -1.0, sigma = 0.5))]
    fn cir(a: f64, b: f64, sigma: f64) -> PyResult<Self> {
        Ok(Self { inner: Arc::new(CirModel::new(a, b, sigma).map_err(to_py)?), default_method: SamplingMethod::ExactGamma })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim_state()
    }

    /// `(lo, hi)` corners of the domain box.
    #[getter]
    fn domain(&self) -> (Vec<f64>, Vec<f64>) {
        let b = self.inner.domain_box();
        (b.lo.clone(), b.hi.clone())
    }

    fn params<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner.params())
    }

    fn drift(&self, x: Vec<f64>) -> Vec<f64> {
        self.inner.drift(&x)
    }

    fn __repr__(&self) -> String {
        format!("Model({})", self.inner.params())
    }
}

/// Invariant samples with provenance.
#[pyclass(frozen, module = "genlearn")]
struct Samples {
    inner: SampleSet,
}

#[pymethods]
impl Samples {
    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn method(&self) -> String {
        self.inner.method.to_string()
    }

    fn points(&self) -> Vec<Vec<f64>> {
        self.inner.iter().map(|x| x.to_vec()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.n()
    }
}

/// Draws `n` points from the model's invariant law.
#[pyfunction]
#[pyo3(signature = (model, n, seed, method = None))]
fn sample_invariant(model: &Model, n: usize, seed: u64, method: Option<&str>) -> PyResult<Samples> {
    let method = match method {
        Some(m) => m.parse().map_err(to_py)?,
        None => model.default_method,
    };
    let inner = genlearn_core::sample_invariant(model.inner.as_ref(), n, seed, method).map_err(to_py)?;
    Ok(Samples { inner })
}

/// Builds a sample set from explicit rows.
#[pyfunction]
#[pyo3(signature = (points, seed = 0))]
fn samples_from_points(points: Vec<Vec<f64>>, seed: u64) -> PyResult<Samples> {
    let inner = SampleSet::from_rows(&points, seed, SamplingMethod::ExactInverseCdf).map_err(to_py)?;
    Ok(Samples { inner })
}

/// A fitted estimator together with its Gram system.
#[pyclass(frozen, module = "genlearn")]
struct Fit {
    inner: genlearn_core::Fit,
}

#[pymethods]
impl Fit {
    #[getter]
    fn rank(&self) -> usize {
        self.inner.estimate.rank_r
    }

    #[getter]
    fn lambda_hat(&self) -> Vec<f64> {
        self.inner.estimate.lambda_hat.clone()
    }

    #[getter]
    fn sigma_hat_sq(&self) -> Vec<f64> {
        self.inner.estimate.sigma_hat_sq.clone()
    }

    #[getter]
    fn nu(&self) -> Vec<f64> {
        self.inner.estimate.nu.clone()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.estimate.warnings.clone()
    }

    /// `n × r` values of the eigenfunctions at the training samples.
    fn sample_values(&self) -> Vec<Vec<f64>> {
        rows(diagnostics::sample_values(&self.inner.estimate, &self.inner.gram).as_ref())
    }

    /// `len(points) × r` eigenfunction values.
    fn eigenfunctions(&self, points: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let v = diagnostics::eval_eigenfunctions(&self.inner.estimate, &self.inner.gram, &points).map_err(to_py)?;
        Ok(rows(v.as_ref()))
    }

    fn metric_distortion(&self) -> PyResult<Vec<f64>> {
        diagnostics::metric_distortion(&self.inner.estimate, &self.inner.gram).map_err(to_py)
    }

    fn spectral_bias(&self) -> PyResult<Vec<f64>> {
        diagnostics::spectral_bias(&self.inner.estimate, &self.inner.gram).map_err(to_py)
    }

    /// Diagnostics report as a dict, matched against `oracle` when given.
    #[pyo3(signature = (oracle = None))]
    fn diagnostics<'py>(&self, py: Python<'py>, oracle: Option<&Oracle>) -> PyResult<Bound<'py, PyAny>> {
        let r = diagnostics::compare_to_oracle(
            &self.inner.estimate,
            &self.inner.gram,
            oracle.map(|o| &o.inner),
            serde_json::Value::Null,
        )
        .map_err(to_py)?;
        json_to_py(py, &serde_json::to_value(&r).map_err(|e| PyValueError::new_err(e.to_string()))?)
    }

    /// Structural checks of the Gram system as a dict.
    fn gram_invariants<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let inv = self.inner.gram.check_invariants().map_err(to_py)?;
        json_to_py(py, &serde_json::to_value(&inv).map_err(|e| PyValueError::new_err(e.to_string()))?)
    }

    /// Spectral coefficients of an observable given at the training samples.
    fn observable_coeffs(&self, h: Vec<f64>) -> PyResult<Vec<f64>> {
        forecaster::observable_coeffs(&self.inner.estimate, &self.inner.gram, &h).map_err(to_py)
    }

    /// Forecast of `E[h(X_t) | X_0 = x]` for each point.
    fn predict(&self, h: Vec<f64>, points: Vec<Vec<f64>>, t: f64) -> PyResult<Vec<f64>> {
        forecaster::predict_many(&self.inner.estimate, &self.inner.gram, &h, &points, t).map_err(to_py)
    }
}

/// Reduced-rank estimator with an RBF kernel of the given lengthscale.
#[pyfunction]
fn fit_rrr(samples: &Samples, model: &Model, lengthscale: f64, mu: f64, gamma: f64, r: usize) -> PyResult<Fit> {
    let k = RbfKernel::from_lengthscale(lengthscale);
    let inner = genlearn_core::fit_rrr(&samples.inner, model.inner.clone(), k, mu, gamma, r).map_err(to_py)?;
    Ok(Fit { inner })
}

/// Full-rank estimator.
#[pyfunction]
fn fit_krr(samples: &Samples, model: &Model, lengthscale: f64, mu: f64, gamma: f64) -> PyResult<Fit> {
    let k = RbfKernel::from_lengthscale(lengthscale);
    let inner = genlearn_core::fit_krr(&samples.inner, model.inner.clone(), k, mu, gamma).map_err(to_py)?;
    Ok(Fit { inner })
}

/// Finite-volume reference spectrum.
#[pyclass(frozen, module = "genlearn")]
struct Oracle {
    inner: OracleSpectrum,
}

#[pymethods]
impl Oracle {
    #[getter]
    fn eigenvalues(&self) -> Vec<f64> {
        self.inner.eigenvalues.clone()
    }

    #[getter]
    fn solver(&self) -> String {
        self.inner.solver.clone()
    }

    fn interpolate(&self, mode: usize, x: Vec<f64>) -> PyResult<f64> {
        if mode >= self.inner.n_modes() {
            return Err(PyValueError::new_err(format!("mode {mode} out of range")));
        }
        Ok(self.inner.interpolate(mode, &x))
    }
}

#[pyfunction]
#[pyo3(signature = (model, grid_n = 4000))]
fn oracle_1d(model: &Model, grid_n: usize) -> PyResult<Oracle> {
    Ok(Oracle { inner: oracle::fd_generator_1d(model.inner.as_ref(), grid_n).map_err(to_py)? })
}

#[pyfunction]
#[pyo3(signature = (model, nx = 201, ny = 201))]
fn oracle_2d(model: &Model, nx: usize, ny: usize) -> PyResult<Oracle> {
    Ok(Oracle { inner: oracle::fd_generator_2d(model.inner.as_ref(), nx, ny).map_err(to_py)? })
}

/// `E[X_t | X_0 = x0]` for the CIR process.
#[pyfunction]
fn cir_conditional_mean(a: f64, b: f64, sigma: f64, x0: f64, t: f64) -> PyResult<f64> {
    let m = CirModel::new(a, b, sigma).map_err(to_py)?;
    Ok(oracle::cir_conditional_mean(&m, x0, t))
}

#[pymodule]
fn genlearn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("GenlearnError", m.py().get_type::<GenlearnError>())?;
    m.add_class::<Model>()?;
    m.add_class::<Samples>()?;
    m.add_class::<Fit>()?;
    m.add_class::<Oracle>()?;
    m.add_function(wrap_pyfunction!(sample_invariant, m)?)?;
    m.add_function(wrap_pyfunction!(samples_from_points, m)?)?;
    m.add_function(wrap_pyfunction!(fit_rrr, m)?)?;
    m.add_function(wrap_pyfunction!(fit_krr, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_1d, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_2d, m)?)?;
    m.add_function(wrap_pyfunction!(cir_conditional_mean, m)?)?;
    Ok(())
}

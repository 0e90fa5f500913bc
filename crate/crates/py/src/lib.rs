//! Python bindings. Images cross the boundary as flat row-major `float`
//! lists of `n * resolution * resolution` values; reports come back as
//! plain dicts.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde::Serialize;
use serde_json::Value;

use hvae_core::evalsuite::{self, LassoConfig, SENSITIVITY_FACTORS};
use hvae_core::gaussian::{kl_diag_elem, kl_standard_elem, relative_kl_elem};
use hvae_core::model::{read_checkpoint, Hvae};
use hvae_core::objectives::{self, ScheduleConfig};
use hvae_core::phantom::{self, Dataset, FactorRanges, SplitData};
use hvae_core::rng::NoiseSource;
use hvae_core::trainer::{self, RunDir};
use hvae_core::{HvaeError, Tensor};

fn err(e: HvaeError) -> PyErr {
    match e {
        HvaeError::Io { .. } => PyIOError::new_err(e.to_string()),
        HvaeError::NonFinite { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py(py: Python<'_>, v: &Value) -> PyResult<PyObject> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_py(py),
        Value::Number(n) => match (n.as_i64(), n.as_u64()) {
            (Some(i), _) => i.into_py(py),
            (_, Some(u)) => u.into_py(py),
            _ => n.as_f64().unwrap_or(f64::NAN).into_py(py),
        },
        Value::String(s) => s.into_py(py),
        Value::Array(a) => {
            let items = a.iter().map(|x| json_to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new_bound(py, items).into_py(py)
        }
        Value::Object(m) => {
            let d = PyDict::new_bound(py);
            for (k, x) in m {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_py(py)
        }
    })
}

fn to_py<S: Serialize>(py: Python<'_>, s: &S) -> PyResult<PyObject> {
    let v = serde_json::to_value(s).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json_to_py(py, &v)
}

fn same_len(a: usize, others: &[usize]) -> PyResult<()> {
    if others.iter().any(|&b| b != a) {
        return Err(PyValueError::new_err("inputs must have equal lengths"));
    }
    Ok(())
}

fn rows_to_matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let d = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must have equal lengths"));
    }
    Ok(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]))
}

// ---- gaussian_core ----------------------------------------------------------

/// Element-wise KL(N(mean, exp(log_std)^2) || N(0, 1)).
#[pyfunction]
fn kl_standard(mean: Vec<f64>, log_std: Vec<f64>) -> PyResult<Vec<f64>> {
    same_len(mean.len(), &[log_std.len()])?;
    Ok(mean.iter().zip(&log_std).map(|(&m, &s)| kl_standard_elem(m, s)).collect())
}

/// Element-wise KL between two diagonal Gaussians.
#[pyfunction]
fn kl_diag(q_mean: Vec<f64>, q_log_std: Vec<f64>, p_mean: Vec<f64>, p_log_std: Vec<f64>) -> PyResult<Vec<f64>> {
    same_len(q_mean.len(), &[q_log_std.len(), p_mean.len(), p_log_std.len()])?;
    Ok((0..q_mean.len())
        .map(|i| kl_diag_elem(q_mean[i], q_log_std[i], p_mean[i], p_log_std[i]))
        .collect())
}

/// Element-wise KL of a residual posterior against its prior.
#[pyfunction]
fn relative_kl(prior_log_std: Vec<f64>, delta_mean: Vec<f64>, delta_log_std: Vec<f64>) -> PyResult<Vec<f64>> {
    same_len(prior_log_std.len(), &[delta_mean.len(), delta_log_std.len()])?;
    Ok((0..prior_log_std.len())
        .map(|i| relative_kl_elem(prior_log_std[i], delta_mean[i], delta_log_std[i]))
        .collect())
}

// ---- objectives -------------------------------------------------------------

#[pyfunction]
#[pyo3(signature = (iteration, cycle_length=10_000, beta_init=2e-7, ramp_fraction=0.5))]
fn kl_anneal_coefficient(iteration: u64, cycle_length: u64, beta_init: f64, ramp_fraction: f64) -> PyResult<f64> {
    let cfg = ScheduleConfig {
        cycle_length,
        beta_init,
        ramp_fraction,
    };
    cfg.validate().map_err(err)?;
    Ok(objectives::kl_anneal_coefficient(iteration, &cfg))
}

#[pyfunction]
fn kl_balancing_coeffs(layer_sizes: Vec<f64>, layer_klds: Vec<f64>) -> PyResult<Vec<f64>> {
    objectives::kl_balancing_coeffs(&layer_sizes, &layer_klds).map_err(err)
}

#[pyfunction]
fn supervision_loss(pred: Vec<f64>, label: Vec<f64>) -> PyResult<f64> {
    let n = pred.len();
    let p = Tensor::from_vec(&[n], pred).map_err(err)?;
    let y = Tensor::from_vec(&[label.len()], label).map_err(err)?;
    objectives::supervision_loss(&p, &y).map_err(err)
}

// ---- evalsuite --------------------------------------------------------------

/// PSNR in dB; `data_range` defaults to the reference's max - min.
#[pyfunction]
#[pyo3(signature = (reference, test, data_range=None))]
fn psnr(reference: Vec<f64>, test: Vec<f64>, data_range: Option<f64>) -> PyResult<f64> {
    let r = data_range.unwrap_or_else(|| evalsuite::data_range(&reference));
    evalsuite::psnr(&reference, &test, r).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (reference, test, height, width, data_range=None))]
fn ssim(reference: Vec<f64>, test: Vec<f64>, height: usize, width: usize, data_range: Option<f64>) -> PyResult<f64> {
    let r = data_range.unwrap_or_else(|| evalsuite::data_range(&reference));
    evalsuite::ssim(&reference, &test, height, width, r).map_err(err)
}

/// Fréchet distance between Gaussians fitted to two sample sets (rows are samples).
#[pyfunction]
fn frechet_distance(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>) -> PyResult<f64> {
    let d = evalsuite::frechet_distance(&rows_to_matrix(&a)?, &rows_to_matrix(&b)?).map_err(err)?;
    Ok(d.distance)
}

/// Coordinate-descent Lasso; returns `{coef, intercept, sweeps, converged}`.
#[pyfunction]
#[pyo3(signature = (x, y, alpha=10.0))]
fn lasso_fit(py: Python<'_>, x: Vec<Vec<f64>>, y: Vec<f64>, alpha: f64) -> PyResult<PyObject> {
    let cfg = LassoConfig {
        alpha,
        ..LassoConfig::default()
    };
    let fit = evalsuite::lasso_fit(&rows_to_matrix(&x)?, &y, &cfg).map_err(err)?;
    let d = PyDict::new_bound(py);
    d.set_item("coef", fit.coef.clone())?;
    d.set_item("intercept", fit.intercept)?;
    d.set_item("sweeps", fit.sweeps)?;
    d.set_item("converged", fit.converged)?;
    Ok(d.into_py(py))
}

// ---- phantom ----------------------------------------------------------------

/// Writes a phantom dataset and returns its manifest.
#[pyfunction]
#[pyo3(signature = (n, seed, out_dir, resolution=64))]
fn make_dataset(py: Python<'_>, n: usize, seed: u64, out_dir: PathBuf, resolution: usize) -> PyResult<PyObject> {
    let m = py
        .allow_threads(|| phantom::make_dataset(n, seed, resolution, &out_dir))
        .map_err(err)?;
    to_py(py, &m)
}

/// One phantom as `{image, mask, factors}`.
#[pyfunction]
#[pyo3(signature = (seed, index, resolution=64))]
fn generate_sample(py: Python<'_>, seed: u64, index: usize, resolution: usize) -> PyResult<PyObject> {
    let s = phantom::generate_sample(seed, index, resolution, &FactorRanges::default()).map_err(err)?;
    let d = PyDict::new_bound(py);
    d.set_item("image", s.image)?;
    d.set_item("mask", s.mask)?;
    d.set_item("factors", to_py(py, &s.factors)?)?;
    Ok(d.into_py(py))
}

// ---- trainer ----------------------------------------------------------------

/// Run configuration; keys match the `key = value` config file format.
#[pyclass]
#[derive(Clone)]
struct RunConfig {
    inner: trainer::RunConfig,
}

#[pymethods]
impl RunConfig {
    #[new]
    #[pyo3(signature = (text=None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => trainer::RunConfig::from_text(t).map_err(err)?,
            None => trainer::RunConfig::default(),
        };
        Ok(RunConfig { inner })
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let text = value.str()?.to_string();
        let text = match text.as_str() {
            "True" => "true".to_string(),
            "False" => "false".to_string(),
            _ => text,
        };
        self.inner.set(key, &text).map_err(err)
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .get(key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown config key '{key}'")))
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig({:?})", self.inner.to_text())
    }
}

/// Trains into `out_dir`; returns `{final_checkpoint, records}`.
#[pyfunction]
fn train(py: Python<'_>, config: &RunConfig, out_dir: PathBuf) -> PyResult<PyObject> {
    let cfg = config.inner.clone();
    let out = py
        .allow_threads(|| trainer::train(&cfg, &RunDir::new(out_dir)))
        .map_err(err)?;
    let d = PyDict::new_bound(py);
    d.set_item("final_checkpoint", out.final_checkpoint.to_string_lossy().into_owned())?;
    d.set_item("records", to_py(py, &out.records)?)?;
    Ok(d.into_py(py))
}

// ---- hvae_model -------------------------------------------------------------

#[pyclass]
struct Model {
    inner: Hvae<f32>,
}

impl Model {
    fn images(&self, flat: Vec<f32>) -> PyResult<Tensor<f32>> {
        let r = self.inner.config().resolution;
        if flat.is_empty() || flat.len() % (r * r) != 0 {
            return Err(PyValueError::new_err(format!(
                "image data length {} is not a positive multiple of {r}x{r}",
                flat.len()
            )));
        }
        Tensor::from_vec(&[flat.len() / (r * r), r, r, 1], flat).map_err(err)
    }
}

fn load_split(data_dir: &PathBuf, split: &str) -> PyResult<SplitData> {
    let ds = Dataset::open(data_dir).map_err(err)?;
    match split {
        "train" => ds.train(),
        "val" => ds.val(),
        "test" => ds.test(),
        other => return Err(PyValueError::new_err(format!("unknown split '{other}'"))),
    }
    .map_err(err)
}

#[pymethods]
impl Model {
    /// Freshly initialised model for `config`.
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &RunConfig, seed: u64) -> PyResult<Self> {
        Ok(Model {
            inner: Hvae::new(config.inner.model.clone(), seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = read_checkpoint(&path).map_err(err)?;
        Ok(Model {
            inner: Hvae::from_params(ck.config, ck.params).map_err(err)?,
        })
    }

    #[getter]
    fn variant(&self) -> String {
        self.inner.variant().to_string()
    }

    #[getter]
    fn levels(&self) -> usize {
        self.inner.levels()
    }

    #[getter]
    fn resolution(&self) -> usize {
        self.inner.config().resolution
    }

    fn num_parameters(&self) -> usize {
        self.inner.params().num_scalars()
    }

    /// Posterior-mean reconstructions.
    fn reconstruct(&self, py: Python<'_>, images: Vec<f32>) -> PyResult<Vec<f32>> {
        let x = self.images(images)?;
        let out = py
            .allow_threads(|| self.inner.reconstruct(&x, &mut NoiseSource::new(0, 0).with_scale(0.0)))
            .map_err(err)?;
        Ok(out.data().to_vec())
    }

    /// Ancestral samples; temperature 0 gives the modal image.
    #[pyo3(signature = (n, temperature=1.0, seed=0))]
    fn generate(&self, py: Python<'_>, n: usize, temperature: f64, seed: u64) -> PyResult<Vec<f32>> {
        let out = py
            .allow_threads(|| self.inner.generate(n, temperature, seed))
            .map_err(err)?;
        Ok(out.data().to_vec())
    }

    /// Decodes with `b`'s encoder deltas at `layers` and `a`'s elsewhere.
    fn style_mix(&self, py: Python<'_>, a: Vec<f32>, b: Vec<f32>, layers: Vec<usize>) -> PyResult<Vec<f32>> {
        let (xa, xb) = (self.images(a)?, self.images(b)?);
        let out = py
            .allow_threads(|| evalsuite::style_mix(&self.inner, &xa, &xb, &layers))
            .map_err(err)?;
        Ok(out.data().to_vec())
    }

    /// Reconstruction metrics on one split of a dataset directory.
    #[pyo3(signature = (data_dir, split="test", feature_seed=0))]
    fn evaluate(&self, py: Python<'_>, data_dir: PathBuf, split: &str, feature_seed: u64) -> PyResult<PyObject> {
        let data = load_split(&data_dir, split)?;
        let rep = py
            .allow_threads(|| evalsuite::evaluate_reconstruction(&self.inner, &data, feature_seed))
            .map_err(err)?;
        to_py(py, &rep)
    }

    /// Layer-wise Lasso probe for lesion area (train split fits, test split scores).
    #[pyo3(signature = (data_dir, alpha=10.0))]
    fn probe(&self, py: Python<'_>, data_dir: PathBuf, alpha: f64) -> PyResult<PyObject> {
        let (train, test) = (load_split(&data_dir, "train")?, load_split(&data_dir, "test")?);
        let cfg = LassoConfig {
            alpha,
            ..LassoConfig::default()
        };
        let rep = py
            .allow_threads(|| evalsuite::informativeness_probe(&self.inner, &train, &test, &cfg))
            .map_err(err)?;
        to_py(py, &rep)
    }

    /// Per-group attribute sensitivity on the test split.
    #[pyo3(signature = (data_dir, n=None))]
    fn sensitivity(&self, py: Python<'_>, data_dir: PathBuf, n: Option<usize>) -> PyResult<PyObject> {
        let test = load_split(&data_dir, "test")?;
        let rows: Vec<usize> = (0..n.unwrap_or(test.len()).min(test.len())).collect();
        let sub = test.subset(&rows);
        let cfg = self.inner.config();
        let reference = cfg.supervision.enabled.then_some(cfg.supervision.target_layer);
        let rep = py
            .allow_threads(|| {
                evalsuite::sensitivity_scan(&self.inner, &sub.images, &sub.masks, &SENSITIVITY_FACTORS, reference)
            })
            .map_err(err)?;
        to_py(py, &rep)
    }
}

#[pymodule]
pub fn hvae(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kl_standard, m)?)?;
    m.add_function(wrap_pyfunction!(kl_diag, m)?)?;
    m.add_function(wrap_pyfunction!(relative_kl, m)?)?;
    m.add_function(wrap_pyfunction!(kl_anneal_coefficient, m)?)?;
    m.add_function(wrap_pyfunction!(kl_balancing_coeffs, m)?)?;
    m.add_function(wrap_pyfunction!(supervision_loss, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    m.add_function(wrap_pyfunction!(lasso_fit, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(generate_sample, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_class::<RunConfig>()?;
    m.add_class::<Model>()?;
    Ok(())
}

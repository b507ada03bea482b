//! Python bindings for the `uvit` crate. Arrays cross the boundary as flat
//! lists of floats plus a shape tuple.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use uvit::data::{load_checkpoint, save_checkpoint, Checkpoint};
use uvit::eval::{frechet_distance as fd, FeatureStats};
use uvit::samplers::{sample_model, SamplerSpec};
use uvit::{ConditionInput, Error, NoiseSchedule, Tensor, UViTConfig, UViTModel};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Persistence(_) | Error::Io(_) | Error::Ingestion { .. } => {
            PyIOError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn config_from(preset: Option<&str>, overrides: Option<HashMap<String, String>>) -> PyResult<UViTConfig> {
    let mut cfg = match preset.unwrap_or("small_cifar10") {
        "small_cifar10" => UViTConfig::small_cifar10(),
        "small_deep_text" => UViTConfig::small_deep_text(),
        "mid_imagenet64" => UViTConfig::mid_imagenet64(),
        "large_imagenet64" => UViTConfig::large_imagenet64(),
        other => return Err(PyValueError::new_err(format!("unknown preset '{other}'"))),
    };
    let mut pairs: Vec<(String, String)> = overrides.unwrap_or_default().into_iter().collect();
    pairs.sort();
    for (k, v) in pairs {
        if !cfg.set(&k, &v).map_err(to_py)? {
            return Err(PyValueError::new_err(format!("unknown config key '{k}'")));
        }
    }
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Parameter count of a configuration without allocating the weights.
#[pyfunction]
#[pyo3(signature = (preset=None, overrides=None))]
fn param_count(preset: Option<&str>, overrides: Option<HashMap<String, String>>) -> PyResult<usize> {
    let cfg = config_from(preset, overrides)?;
    Ok(uvit::backbone::expected_param_count(&cfg))
}

/// Fréchet distance between two Gaussians given as mean lists and row-major
/// covariance lists.
#[pyfunction]
fn frechet_distance(mu_a: Vec<f64>, sigma_a: Vec<f64>, mu_b: Vec<f64>, sigma_b: Vec<f64>) -> PyResult<f64> {
    let stats = |mu: Vec<f64>, sigma: Vec<f64>| -> PyResult<FeatureStats> {
        let d = mu.len();
        if sigma.len() != d * d {
            return Err(PyValueError::new_err(format!(
                "covariance needs {} entries, got {}",
                d * d,
                sigma.len()
            )));
        }
        Ok(FeatureStats {
            mu: nalgebra::DVector::from_vec(mu),
            sigma: nalgebra::DMatrix::from_row_slice(d, d, &sigma),
            n: 2,
        })
    };
    fd(&stats(mu_a, sigma_a)?, &stats(mu_b, sigma_b)?).map_err(to_py)
}

#[pyclass(name = "NoiseSchedule")]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    #[pyo3(signature = (steps=1000, beta_start=1e-4, beta_end=0.02))]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(Self {
            inner: NoiseSchedule::linear(steps, beta_start, beta_end).map_err(to_py)?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.inner.alpha_bar(t).map_err(to_py)
    }

    fn log_snr(&self, t: usize) -> PyResult<f64> {
        self.inner.log_snr(t).map_err(to_py)
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·eps` elementwise.
    fn add_noise(&self, x0: Vec<f64>, eps: Vec<f64>, t: usize) -> PyResult<Vec<f64>> {
        let n = x0.len();
        let x = Tensor::from_vec(&[n], x0).map_err(to_py)?;
        let e = Tensor::from_vec(&[eps.len()], eps).map_err(to_py)?;
        Ok(self.inner.add_noise(&x, &e, t).map_err(to_py)?.into_data())
    }
}

fn condition(model: &UViTModel, label: Option<i64>) -> PyResult<ConditionInput> {
    match (label, model.config().condition) {
        (None, uvit::backbone::ConditionKind::None) => Ok(ConditionInput::Unconditional),
        (Some(-1), _) => Ok(ConditionInput::Null),
        (Some(k), _) if k >= 0 => Ok(ConditionInput::Class(k as usize)),
        (None, kind) => Err(PyValueError::new_err(format!(
            "model with condition {kind} needs class labels"
        ))),
        (Some(k), _) => Err(PyValueError::new_err(format!("invalid label {k}"))),
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: UViTModel,
    iteration: u64,
}

#[pymethods]
impl PyModel {
    /// Builds a freshly initialized model from a preset plus `key -> value` overrides.
    #[staticmethod]
    #[pyo3(signature = (preset=None, overrides=None, seed=0))]
    fn build(preset: Option<&str>, overrides: Option<HashMap<String, String>>, seed: u64) -> PyResult<Self> {
        let cfg = config_from(preset, overrides)?;
        Ok(Self {
            inner: UViTModel::build(cfg, seed).map_err(to_py)?,
            iteration: 0,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ck = load_checkpoint(&path).map_err(to_py)?;
        Ok(Self {
            inner: ck.to_model().map_err(to_py)?,
            iteration: ck.iteration,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&Checkpoint::from_model(&self.inner, self.iteration, None, None), &path)
            .map_err(to_py)
    }

    fn count_params(&self) -> usize {
        self.inner.count_params()
    }

    fn config(&self) -> HashMap<String, String> {
        self.inner.config().to_pairs().into_iter().collect()
    }

    /// Image shape `(H, W, C)`.
    #[getter]
    fn image_shape(&self) -> (usize, usize, usize) {
        let c = self.inner.config();
        (c.image_height, c.image_width, c.channels)
    }

    /// Noise prediction for a flat `[B, H, W, C]` batch. `labels` holds one
    /// class per image (`-1` for the null condition) on class models.
    #[pyo3(signature = (x, t, labels=None))]
    fn forward(&self, py: Python<'_>, x: Vec<f64>, t: Vec<usize>, labels: Option<Vec<i64>>) -> PyResult<Vec<f64>> {
        let (h, w, c) = self.image_shape();
        let b = t.len();
        let x = Tensor::from_vec(&[b, h, w, c], x).map_err(to_py)?;
        let conds = match labels {
            Some(l) => l
                .into_iter()
                .map(|k| condition(&self.inner, Some(k)))
                .collect::<PyResult<Vec<_>>>()?,
            None => vec![condition(&self.inner, None)?; b],
        };
        py.allow_threads(|| self.inner.forward(&x, &t, &conds))
            .map(Tensor::into_data)
            .map_err(to_py)
    }

    /// Draws `count` images; returns the flat `[count, H, W, C]` data.
    #[pyo3(signature = (count, sampler="dpm_solver", steps=50, order=2, seed=0, guidance=None, labels=None))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        py: Python<'_>,
        count: usize,
        sampler: &str,
        steps: usize,
        order: usize,
        seed: u64,
        guidance: Option<f64>,
        labels: Option<Vec<i64>>,
    ) -> PyResult<Vec<f64>> {
        let spec = SamplerSpec {
            kind: sampler.parse().map_err(to_py)?,
            steps,
            order,
            guidance,
            seed,
        };
        let conds = match labels {
            Some(l) if l.len() == count => l
                .into_iter()
                .map(|k| condition(&self.inner, Some(k)))
                .collect::<PyResult<Vec<_>>>()?,
            Some(l) => {
                return Err(PyValueError::new_err(format!(
                    "{} labels for {count} samples",
                    l.len()
                )))
            }
            None => vec![condition(&self.inner, None)?; count],
        };
        let schedule = NoiseSchedule::linear(
            self.inner.config().diffusion_steps,
            uvit::schedule::DEFAULT_BETA_START,
            uvit::schedule::DEFAULT_BETA_END,
        )
        .map_err(to_py)?;
        py.allow_threads(|| sample_model(&self.inner, &schedule, &spec, &conds))
            .map(Tensor::into_data)
            .map_err(to_py)
    }
}

#[pymodule]
fn uvit_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(param_count, m)?)?;
    m.add_function(wrap_pyfunction!(frechet_distance, m)?)?;
    Ok(())
}

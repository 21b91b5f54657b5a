use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mvt_core::dataset::{load_dataset, synth_dataset, write_dataset, Label, SynthConfig};
use mvt_core::metrics::{self, StdKind};
use mvt_core::model::{load_checkpoint, param_count, save_checkpoint, toy_gradient_check, Arch, ModelConfig, Readout};
use mvt_core::tensor::{GradCheckConfig, Tensor};
use mvt_core::training::{self, LrSchedule, TrainConfig};

fn to_py(e: mvt_core::Error) -> PyErr {
    match e {
        mvt_core::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        mvt_core::Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Model architecture. Starts from a preset and applies overrides.
#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
struct PyModelConfig {
    inner: ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    #[new]
    #[pyo3(signature = (arch="toy", local_blocks=None, global_blocks=None, readout=None))]
    fn new(arch: &str, local_blocks: Option<usize>, global_blocks: Option<usize>, readout: Option<&str>) -> PyResult<Self> {
        let arch: Arch = arch.parse().map_err(to_py)?;
        let mut cfg = ModelConfig::preset(arch);
        if let Some(l) = local_blocks {
            cfg.local_blocks = l;
        }
        if let Some(g) = global_blocks {
            cfg.global_blocks = g;
        }
        if let Some(r) = readout {
            cfg.readout = r.parse::<Readout>().map_err(to_py)?;
        }
        cfg.validate().map_err(to_py)?;
        Ok(Self { inner: cfg })
    }

    #[getter]
    fn local_blocks(&self) -> usize {
        self.inner.local_blocks
    }

    #[getter]
    fn global_blocks(&self) -> usize {
        self.inner.global_blocks
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.image_size
    }

    #[getter]
    fn channels(&self) -> usize {
        self.inner.channels
    }

    #[getter]
    fn d_embed(&self) -> usize {
        self.inner.d_embed
    }

    fn param_count(&self) -> usize {
        param_count(&self.inner)
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        json_to_py(py, &self.inner)
    }

    fn __repr__(&self) -> String {
        format!(
            "ModelConfig(local_blocks={}, global_blocks={}, d_embed={}, image_size={})",
            self.inner.local_blocks, self.inner.global_blocks, self.inner.d_embed, self.inner.image_size
        )
    }
}

/// A configuration with its weights.
#[pyclass(name = "Model")]
struct PyModel {
    inner: mvt_core::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    #[pyo3(signature = (config, seed=0))]
    fn init(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        let inner = mvt_core::Model::init(config.inner.clone(), seed).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, config) = load_checkpoint(&path).map_err(to_py)?;
        Ok(Self {
            inner: mvt_core::Model { config, params },
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner.params, &self.inner.config, &path).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.inner.config.clone(),
        }
    }

    /// Logits for four views (LCC, RCC, LMLO, RMLO), each a flat list of
    /// `channels * image_size * image_size` values in [0, 255].
    fn logits(&self, views: Vec<Vec<f64>>) -> PyResult<(f64, f64)> {
        let s = self.inner.config.image_size;
        let shape = vec![self.inner.config.channels, s, s];
        let views = views
            .into_iter()
            .map(|v| Tensor::new(shape.clone(), v))
            .collect::<mvt_core::Result<Vec<_>>>()
            .map_err(to_py)?;
        let l = self.inner.logits(&views).map_err(to_py)?;
        Ok((l[0], l[1]))
    }

    /// `(case_id, malignancy score, prediction, label)` for every case in a
    /// dataset directory.
    fn predict(&self, py: Python<'_>, data_dir: PathBuf) -> PyResult<Vec<(String, f64, u8, u8)>> {
        let preds = py
            .detach(|| {
                let cases = load_dataset(&data_dir)?;
                let prepared = training::prepare_cases(&cases, &self.inner.config)?;
                training::evaluate(&self.inner.params, &self.inner.config, &prepared)
            })
            .map_err(to_py)?;
        Ok(preds.into_iter().map(|p| (p.case_id, p.score, p.pred, p.label)).collect())
    }
}

fn train_config(
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    weight_decay: f64,
    lr_schedule: &str,
    warmup_epochs: usize,
    folds: usize,
    seed: u64,
) -> PyResult<TrainConfig> {
    let cfg = TrainConfig {
        epochs,
        batch_size,
        learning_rate,
        weight_decay,
        lr_schedule: lr_schedule.parse::<LrSchedule>().map_err(PyValueError::new_err)?,
        warmup_epochs,
        seed,
        folds,
    };
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Writes a synthetic four-view dataset; returns `(cases, malignant)`.
#[pyfunction]
#[pyo3(signature = (out_dir, cases=200, seed=0, malignant_fraction=0.5, blob_intensity=None, distractor_rate=None, image_size=None))]
fn synth(
    py: Python<'_>,
    out_dir: PathBuf,
    cases: usize,
    seed: u64,
    malignant_fraction: f64,
    blob_intensity: Option<f64>,
    distractor_rate: Option<f64>,
    image_size: Option<usize>,
) -> PyResult<(usize, usize)> {
    let d = SynthConfig::default();
    let cfg = SynthConfig {
        cases,
        seed,
        malignant_fraction,
        blob_intensity: blob_intensity.unwrap_or(d.blob_intensity),
        distractor_rate: distractor_rate.unwrap_or(d.distractor_rate),
        image_size: image_size.unwrap_or(d.image_size),
        ..d
    };
    py.detach(|| {
        let records = synth_dataset(&cfg)?;
        write_dataset(&records, &out_dir)?;
        let malignant = records.iter().filter(|c| c.label == Label::Malignant).count();
        Ok((records.len(), malignant))
    })
    .map_err(to_py)
}

/// Trains on every case in `data_dir` and returns the model.
#[pyfunction]
#[pyo3(signature = (data_dir, config, epochs=100, batch_size=8, learning_rate=5e-4, weight_decay=0.05, lr_schedule="cosine", warmup_epochs=0, seed=0))]
fn train(
    py: Python<'_>,
    data_dir: PathBuf,
    config: &PyModelConfig,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    weight_decay: f64,
    lr_schedule: &str,
    warmup_epochs: usize,
    seed: u64,
) -> PyResult<PyModel> {
    let tcfg = train_config(epochs, batch_size, learning_rate, weight_decay, lr_schedule, warmup_epochs, 5, seed)?;
    let cfg = config.inner.clone();
    let params = py
        .detach(|| {
            let cases = load_dataset(&data_dir)?;
            let prepared = training::prepare_cases(&cases, &cfg)?;
            training::train_model(&prepared, &cfg, &tcfg)
        })
        .map_err(to_py)?
        .params;
    Ok(PyModel {
        inner: mvt_core::Model { config: cfg, params },
    })
}

/// Stratified k-fold cross-validation; returns the summary as a dict.
#[pyfunction]
#[pyo3(signature = (data_dir, config, folds=5, epochs=100, batch_size=8, learning_rate=5e-4, weight_decay=0.05, lr_schedule="cosine", warmup_epochs=0, seed=0))]
fn cross_validate<'py>(
    py: Python<'py>,
    data_dir: PathBuf,
    config: &PyModelConfig,
    folds: usize,
    epochs: usize,
    batch_size: usize,
    learning_rate: f64,
    weight_decay: f64,
    lr_schedule: &str,
    warmup_epochs: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let tcfg = train_config(epochs, batch_size, learning_rate, weight_decay, lr_schedule, warmup_epochs, folds, seed)?;
    let cfg = config.inner.clone();
    let result = py
        .detach(|| {
            let cases = load_dataset(&data_dir)?;
            let prepared = training::prepare_cases(&cases, &cfg)?;
            training::run_cross_validation(&prepared, &cfg, &tcfg)
        })
        .map_err(to_py)?;
    json_to_py(py, &result.summary)
}

#[pyfunction]
fn stratified_folds(labels: Vec<u8>, k: usize, seed: u64) -> PyResult<Vec<Vec<usize>>> {
    let labels = labels
        .into_iter()
        .map(|l| Label::from_index(l as usize).ok_or_else(|| PyValueError::new_err(format!("label {l} is not 0 or 1"))))
        .collect::<PyResult<Vec<_>>>()?;
    training::stratified_folds(&labels, k, seed).map_err(to_py)
}

#[pyfunction]
fn empirical_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::empirical_auc(&scores, &labels).map_err(to_py)
}

/// Confusion counts plus derived rates, as a dict.
#[pyfunction]
fn confusion<'py>(py: Python<'py>, predictions: Vec<u8>, labels: Vec<u8>) -> PyResult<Bound<'py, PyAny>> {
    let cm = metrics::confusion(&predictions, &labels).map_err(to_py)?;
    let out = serde_json::json!({ "confusion": cm, "metrics": metrics::derived_metrics(&cm) });
    json_to_py(py, &out)
}

#[pyfunction]
#[pyo3(signature = (values, population=false))]
fn mean_std(values: Vec<f64>, population: bool) -> PyResult<(f64, f64)> {
    let kind = if population { StdKind::Population } else { StdKind::Sample };
    metrics::mean_std(&values, kind).map_err(to_py)
}

/// Largest relative gradient error on a seeded 1+1-block toy model.
#[pyfunction]
#[pyo3(signature = (seed=0, eps=1e-5, max_elements=16))]
fn gradcheck(py: Python<'_>, seed: u64, eps: f64, max_elements: usize) -> PyResult<f64> {
    let gcfg = GradCheckConfig {
        eps,
        max_elements_per_tensor: max_elements,
        seed,
        corrupt_param: None,
    };
    py.detach(|| toy_gradient_check(seed, &gcfg))
        .map(|r| r.max_relative_error)
        .map_err(to_py)
}

#[pymodule]
fn mvt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    m.add_function(wrap_pyfunction!(stratified_folds, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_auc, m)?)?;
    m.add_function(wrap_pyfunction!(confusion, m)?)?;
    m.add_function(wrap_pyfunction!(mean_std, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

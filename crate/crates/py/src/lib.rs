//! Python bindings: tensors and `.pmft` files, the differentiable ops in
//! inference mode, config handling, and the train/eval pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pmfnet::autodiff::PoolMode;
use pmfnet::checkpoint::load_checkpoint;
use pmfnet::cli::model_grad_check;
use pmfnet::config::{Preset, RunConfig};
use pmfnet::data::pmft::{read_pmft_any, write_pmft, AnyTensor};
use pmfnet::data::sample::{load_dataset, load_sample};
use pmfnet::data::synth::synth_generate;
use pmfnet::fusion::network::predict as model_predict;
use pmfnet::params::{Graph, ParamStore};
use pmfnet::train::{evaluate as model_evaluate, train as model_train, MetricsReport};
use pmfnet::{DType, Error, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::UndefinedMetric(_) => {
            PyArithmeticError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Dense row-major tensor. Values are held as f64; `dtype` is the storage
/// type used when saving.
#[pyclass(name = "Tensor", module = "pmfnet_py", skip_from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: Tensor<f64>,
    dtype: DType,
}

impl PyTensor {
    fn wrap(inner: Tensor<f64>) -> Self {
        PyTensor {
            inner,
            dtype: DType::F64,
        }
    }
}

#[pymethods]
impl PyTensor {
    #[new]
    #[pyo3(signature = (shape, data, dtype = "f64"))]
    fn new(shape: Vec<usize>, data: Vec<f64>, dtype: &str) -> PyResult<Self> {
        let dtype = match dtype {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => {
                return Err(PyValueError::new_err(format!(
                    "dtype must be f32 or f64, got {other:?}"
                )))
            }
        };
        let mut inner = Tensor::new(shape, data).map_err(to_py)?;
        if dtype == DType::F32 {
            inner = inner.cast::<f32>().cast();
        }
        Ok(PyTensor { inner, dtype })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(match read_pmft_any(&path).map_err(to_py)? {
            AnyTensor::F32(t) => PyTensor {
                inner: t.cast(),
                dtype: DType::F32,
            },
            AnyTensor::F64(t) => PyTensor {
                inner: t,
                dtype: DType::F64,
            },
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        match self.dtype {
            DType::F32 => write_pmft(&path, &self.inner.cast::<f32>()),
            DType::F64 => write_pmft(&path, &self.inner),
        }
        .map_err(to_py)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn dtype(&self) -> &'static str {
        self.dtype.name()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?}, dtype={})", self.inner.shape(), self.dtype.name())
    }
}

fn unary(
    x: &PyTensor,
    f: impl FnOnce(&mut Graph<f64>, pmfnet::autodiff::Var) -> pmfnet::Result<pmfnet::autodiff::Var>,
) -> PyResult<PyTensor> {
    let store = ParamStore::new();
    let mut g = Graph::inference(&store);
    let v = g.input(x.inner.clone());
    let y = f(&mut g, v).map_err(to_py)?;
    Ok(PyTensor::wrap(g.value(y).clone()))
}

#[pyfunction]
fn matmul(a: &PyTensor, b: &PyTensor) -> PyResult<PyTensor> {
    unary(a, |g, va| {
        let vb = g.input(b.inner.clone());
        g.matmul(va, vb)
    })
}

#[pyfunction]
#[pyo3(signature = (x, axis = 0))]
fn softmax(x: &PyTensor, axis: usize) -> PyResult<PyTensor> {
    unary(x, |g, v| g.softmax(v, axis))
}

#[pyfunction]
fn gelu(x: &PyTensor) -> PyResult<PyTensor> {
    unary(x, |g, v| g.gelu(v))
}

#[pyfunction]
fn sigmoid(x: &PyTensor) -> PyResult<PyTensor> {
    unary(x, |g, v| g.sigmoid(v))
}

/// Same-padded convolution of `[C_in, H, W]` by `[C_out, C_in, k, k]`.
#[pyfunction]
fn conv2d(x: &PyTensor, weight: &PyTensor, bias: &PyTensor) -> PyResult<PyTensor> {
    unary(x, |g, v| {
        let (w, b) = (g.input(weight.inner.clone()), g.input(bias.inner.clone()));
        g.conv2d(v, w, b)
    })
}

/// `mode` is one of spatial_avg, spatial_max, channel_avg, channel_max, global_avg.
#[pyfunction]
fn pool(x: &PyTensor, mode: &str) -> PyResult<PyTensor> {
    let mode = match mode {
        "spatial_avg" => PoolMode::SpatialAvg,
        "spatial_max" => PoolMode::SpatialMax,
        "channel_avg" => PoolMode::ChannelAvg,
        "channel_max" => PoolMode::ChannelMax,
        "global_avg" => PoolMode::GlobalAvg,
        other => return Err(PyValueError::new_err(format!("unknown pool mode {other:?}"))),
    };
    unary(x, |g, v| g.pool(v, mode))
}

#[pyfunction]
#[pyo3(signature = (x, eps = 1e-5))]
fn layer_norm(x: &PyTensor, eps: f64) -> PyResult<PyTensor> {
    let d = *x.inner.shape().last().unwrap_or(&1);
    unary(x, |g, v| {
        let (gain, shift) = (g.input(Tensor::ones([d])), g.input(Tensor::zeros([d])));
        g.layer_norm(v, gain, shift, eps)
    })
}

#[pyclass(name = "Config", module = "pmfnet_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (preset = "small"))]
    fn new(preset: &str) -> PyResult<Self> {
        let p: Preset = preset.parse().map_err(|e: String| PyValueError::new_err(e))?;
        Ok(PyConfig {
            inner: RunConfig::preset(p),
        })
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        Ok(PyConfig {
            inner: RunConfig::parse(text).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyConfig {
            inner: RunConfig::load(path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        RunConfig::keys().collect()
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .get(key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown key {key:?}")))
    }

    /// Set one key; the whole config is revalidated.
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(to_py)?;
        next.validate().map_err(to_py)?;
        self.inner = next;
        Ok(())
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn model_hash(&self) -> String {
        self.inner.model_hash()
    }
}

fn metrics_dict(m: &MetricsReport) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("acc", m.accuracy),
        ("auc", m.auc),
        ("f1", m.f1),
        ("p", m.precision),
        ("r", m.recall),
    ])
}

/// Acc, AUC, F1, precision and recall of `scores` at `threshold`.
#[pyfunction]
#[pyo3(signature = (scores, labels, threshold = 0.5))]
fn metrics(scores: Vec<f64>, labels: Vec<u8>, threshold: f64) -> PyResult<BTreeMap<&'static str, f64>> {
    Ok(metrics_dict(
        &MetricsReport::compute(&scores, &labels, threshold).map_err(to_py)?,
    ))
}

#[pyfunction]
fn f1_score(precision: f64, recall: f64) -> f64 {
    pmfnet::train::f1_score(precision, recall)
}

#[pyfunction]
fn synth(config: &PyConfig, out: PathBuf) -> PyResult<()> {
    synth_generate(&config.inner.synth(), out).map_err(to_py)
}

/// Train on `<data>/train`, write a checkpoint to `out`, return the log lines.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig, data: PathBuf, out: PathBuf) -> PyResult<Vec<String>> {
    let cfg = config.inner.clone();
    py.detach(move || {
        let samples = load_dataset(data.join("train"))?;
        let mut store = ParamStore::<f32>::init(&cfg.model.param_specs(), cfg.train.seed);
        let logs = model_train(&mut store, &cfg.model, &cfg.train, &samples, |_| {})?;
        let steps = logs.len() * samples.len().div_ceil(cfg.train.batch_size);
        pmfnet::checkpoint::save_checkpoint(&out, &cfg, &store, steps as u64)?;
        Ok(logs.iter().map(ToString::to_string).collect())
    })
    .map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (checkpoint, data, split = "test"))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, data: PathBuf, split: &str) -> PyResult<BTreeMap<&'static str, f64>> {
    let dir = data.join(split);
    py.detach(move || {
        let ck = load_checkpoint::<f32>(&checkpoint)?;
        let samples = load_dataset(dir)?;
        model_evaluate(&ck.params, &ck.config.model, &samples, ck.config.train.threshold)
    })
    .map(|m| metrics_dict(&m))
    .map_err(to_py)
}

/// Crossing probability, modality weights `[N, 3]` and temporal attention
/// `[layers, heads, N, N]` for one sample directory.
#[pyfunction]
fn predict(checkpoint: PathBuf, sample: PathBuf) -> PyResult<(f64, PyTensor, PyTensor)> {
    let ck = load_checkpoint::<f32>(&checkpoint).map_err(to_py)?;
    let s = load_sample(&sample).map_err(to_py)?;
    let (p, d) = model_predict(&ck.params, &ck.config.model, &s).map_err(to_py)?;
    Ok((
        f64::from(p),
        PyTensor::wrap(d.modality_weights.cast()),
        PyTensor::wrap(d.temporal_attention.cast()),
    ))
}

/// Whole-model gradient check; returns `(passed, max_rel_error, params)`.
#[pyfunction]
#[pyo3(signature = (config = None, tol = pmfnet::gradcheck::DEFAULT_TOL, step = pmfnet::gradcheck::DEFAULT_STEP))]
fn gradcheck(py: Python<'_>, config: Option<&PyConfig>, tol: f64, step: f64) -> PyResult<(bool, f64, usize)> {
    let cfg = config.map_or_else(|| RunConfig::preset(Preset::Tiny), |c| c.inner.clone());
    let r = py
        .detach(move || model_grad_check(&cfg, step, tol, None))
        .map_err(to_py)?;
    Ok((r.passed(), r.max_error(), r.entries.len()))
}

#[pymodule]
fn pmfnet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyConfig>()?;
    m.add_function(wrap_pyfunction!(matmul, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(gelu, m)?)?;
    m.add_function(wrap_pyfunction!(sigmoid, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(pool, m)?)?;
    m.add_function(wrap_pyfunction!(layer_norm, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(f1_score, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

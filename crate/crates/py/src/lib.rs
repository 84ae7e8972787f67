//! Python bindings for the core types and batch operations.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use objvid::data::GeneratorConfig;
use objvid::metrics::Segmentation;
use objvid::pipeline::{self, RunConfig};
use objvid::tensor;

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

/// Dense float tensor (row-major f32 storage).
#[pyclass(name = "Tensor", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: tensor::Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f32>) -> PyResult<Self> {
        let want: usize = shape.iter().product();
        if want != data.len() {
            return Err(PyValueError::new_err(format!(
                "shape {shape:?} wants {want} values, got {}",
                data.len()
            )));
        }
        Ok(PyTensor { inner: tensor::Tensor::from_vec(shape, data) })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        PyTensor { inner: tensor::Tensor::zeros(shape) }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyTensor { inner: tensor::load_scalar(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        tensor::save_scalar(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.dims().to_vec()
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.numel()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.dims())
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(
    text: Option<&str>,
    what: &str,
) -> PyResult<Option<T>> {
    match text {
        None => Ok(None),
        Some(t) => serde_json::from_str(t)
            .map(Some)
            .map_err(|e| PyValueError::new_err(format!("bad {what} json: {e}"))),
    }
}

/// Generate a synthetic dataset. `config_json` overrides generator
/// defaults; returns a summary dict as JSON text.
#[pyfunction]
#[pyo3(signature = (out, count=None, seed=0, config_json=None))]
fn make_dataset(
    out: PathBuf,
    count: Option<usize>,
    seed: u64,
    config_json: Option<&str>,
) -> PyResult<String> {
    let mut cfg: GeneratorConfig =
        parse_json(config_json, "generator config")?.unwrap_or_default();
    if let Some(c) = count {
        cfg.count = c;
    }
    let manifest = pipeline::make_dataset(&cfg, seed, &out).map_err(err)?;
    Ok(serde_json::json!({
        "sequences": manifest.sequences.len(),
        "train": manifest.train.len(),
        "val": manifest.val.len(),
        "test": manifest.test.len(),
    })
    .to_string())
}

/// Train a model; `config_json` overrides run-config defaults. Returns a
/// summary dict as JSON text.
#[pyfunction]
#[pyo3(signature = (dataset, out, steps=None, seed=None, config_json=None))]
fn train(
    dataset: PathBuf,
    out: PathBuf,
    steps: Option<u64>,
    seed: Option<u64>,
    config_json: Option<&str>,
) -> PyResult<String> {
    let mut cfg: RunConfig = parse_json(config_json, "run config")?.unwrap_or_default();
    cfg.dataset = dataset.display().to_string();
    cfg.out_dir = out.display().to_string();
    if let Some(s) = steps {
        cfg.steps = s;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let summary = pipeline::train(&cfg).map_err(err)?;
    Ok(serde_json::json!({
        "steps": summary.steps_done,
        "skipped": summary.skipped_steps,
        "total_loss": summary.last.total,
        "checkpoint": summary.checkpoint.display().to_string(),
        "log": summary.log_path.display().to_string(),
    })
    .to_string())
}

/// Evaluate a checkpoint on a dataset split; returns the metrics report
/// as JSON text.
#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, split="test", out=None))]
fn evaluate(
    checkpoint: PathBuf,
    dataset: PathBuf,
    split: &str,
    out: Option<PathBuf>,
) -> PyResult<String> {
    let eval = pipeline::evaluate(&checkpoint, &dataset, split, out.as_deref()).map_err(err)?;
    serde_json::to_string(&eval.report).map_err(err)
}

/// Write reconstruction panel dumps for the given sequence indices.
#[pyfunction]
fn reconstruct(
    checkpoint: PathBuf,
    dataset: PathBuf,
    indices: Vec<usize>,
    out: PathBuf,
) -> PyResult<()> {
    pipeline::reconstruct(&checkpoint, &dataset, &indices, &out).map_err(err)
}

/// Decode prior samples; returns the per-sample presence vectors.
#[pyfunction]
fn generate(
    checkpoint: PathBuf,
    seed: u64,
    count: usize,
    out: PathBuf,
) -> PyResult<Vec<Vec<f64>>> {
    pipeline::generate(&checkpoint, seed, count, &out).map_err(err)
}

/// Run the finite-difference gradient self-checks; returns
/// `(name, max_rel_err, tol, passed)` rows.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn grad_check(seed: u64) -> Vec<(String, f64, f64, bool)> {
    pipeline::grad_check_all(seed)
        .entries
        .into_iter()
        .map(|e| {
            let ok = e.passed();
            (e.name, e.max_rel_err, e.tol, ok)
        })
        .collect()
}

/// Foreground IOU between two instance-id videos of shape `[L,H,W]`.
#[pyfunction]
fn fg_iou(shape: Vec<usize>, pred: Vec<u32>, gt: Vec<u32>) -> PyResult<f64> {
    if shape.len() != 3 {
        return Err(PyValueError::new_err("shape must be [L,H,W]"));
    }
    let n: usize = shape.iter().product();
    if pred.len() != n || gt.len() != n {
        return Err(PyValueError::new_err("id buffers do not match the shape"));
    }
    let p = Segmentation::from_ids(shape[0], shape[1], shape[2], pred);
    let g = Segmentation::from_ids(shape[0], shape[1], shape[2], gt);
    Ok(objvid::metrics::fg_iou(&p, &g))
}

/// Ground-truth self-consistency of one stored sequence:
/// `(fg_iou, depth_mre, detection_ap)` of the ground truth against itself.
#[pyfunction]
fn data_self_check(dataset: PathBuf, index: usize) -> PyResult<(f64, f64, f64)> {
    pipeline::data_self_check(Path::new(&dataset), index).map_err(err)
}

/// PSNR between two tensors of identical shape, in dB.
#[pyfunction]
fn psnr(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    if a.inner.dims() != b.inner.dims() {
        return Err(PyValueError::new_err("shape mismatch"));
    }
    Ok(pipeline::psnr(&a.inner.to_f64(), &b.inner.to_f64()))
}

#[pymodule]
fn objvid_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(fg_iou, m)?)?;
    m.add_function(wrap_pyfunction!(data_self_check, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    Ok(())
}

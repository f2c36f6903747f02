//! Python bindings: parameter counts, the learning-rate schedule, heads,
//! metrics, IDX loading, checkpoints and the `train`/`evaluate` commands.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;

use spinalxfer::checkpoint::{AnyTensor, Checkpoint};
use spinalxfer::heads::{self, HalfOrder, HeadConfig, SpinalHeadConfig, TraditionalHeadConfig};
use spinalxfer::layers::Parameterized;
use spinalxfer::metrics::{self, ClassMetrics};
use spinalxfer::trainer::{self, Schedule, Stage};
use spinalxfer::{runner, Error, Tape, Tensor};

create_exception!(spinalxfer_py, SpinalError, PyException, "Failure reported by spinalxfer.");

fn to_py(e: Error) -> PyErr {
    let msg = format!("{}: {e}", e.kind());
    match &e {
        Error::Config(_) | Error::Usage(_) | Error::Dimension(_) => PyValueError::new_err(msg),
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => {
            PyFileNotFoundError::new_err(msg)
        }
        _ => SpinalError::new_err(msg),
    }
}

#[pyfunction]
#[pyo3(signature = (input_dim, width, sublayers, classes))]
fn spinal_param_count(input_dim: usize, width: usize, sublayers: usize, classes: usize) -> PyResult<usize> {
    let cfg = SpinalHeadConfig::new(input_dim, width, sublayers, classes);
    cfg.validate().map_err(to_py)?;
    Ok(heads::spinal_param_count(&cfg))
}

#[pyfunction]
fn traditional_param_count(input_dim: usize, hidden: usize, classes: usize) -> PyResult<usize> {
    let cfg = TraditionalHeadConfig {
        input_dim,
        hidden,
        classes,
    };
    cfg.validate().map_err(to_py)?;
    Ok(heads::traditional_param_count(&cfg))
}

#[pyfunction]
fn step_lr(base_lr: f64, epoch: usize, step_size: usize, gamma: f64) -> f64 {
    trainer::step_lr(base_lr, epoch, step_size, gamma)
}

/// Per-epoch learning rates of a two-stage schedule.
#[pyfunction]
#[pyo3(signature = (stage1_lr=0.01, stage1_epochs=10, stage2_lr=0.001, stage2_epochs=10, step_size=7, gamma=0.1))]
fn lr_trace(
    stage1_lr: f64,
    stage1_epochs: usize,
    stage2_lr: f64,
    stage2_epochs: usize,
    step_size: usize,
    gamma: f64,
) -> PyResult<Vec<f64>> {
    let schedule = Schedule {
        stages: vec![
            Stage {
                lr: stage1_lr,
                epochs: stage1_epochs,
            },
            Stage {
                lr: stage2_lr,
                epochs: stage2_epochs,
            },
        ],
        step_size,
        gamma,
        ..Schedule::default()
    };
    schedule.validate().map_err(to_py)?;
    Ok(schedule.lr_trace().into_iter().map(|(_, lr)| lr).collect())
}

/// `(precision, recall, f1)`; `None` where a ratio is 0/0.
#[pyfunction]
fn class_metrics(tp: u64, fp: u64, fn_: u64) -> (Option<f64>, Option<f64>, Option<f64>) {
    let m = ClassMetrics::from_counts(tp, fp, fn_);
    (m.precision, m.recall, m.f1)
}

#[pyclass(name = "ConfusionMatrix", module = "spinalxfer_py")]
struct PyConfusionMatrix {
    inner: metrics::ConfusionMatrix,
}

#[pymethods]
impl PyConfusionMatrix {
    #[new]
    #[pyo3(signature = (counts, class_names=None))]
    fn new(counts: Vec<Vec<u64>>, class_names: Option<Vec<String>>) -> PyResult<Self> {
        let names = class_names.unwrap_or_else(|| (0..counts.len()).map(|c| c.to_string()).collect());
        let inner = metrics::ConfusionMatrix::from_counts(counts, names).map_err(to_py)?;
        Ok(PyConfusionMatrix { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (truth, predicted, class_names))]
    fn from_predictions(truth: Vec<usize>, predicted: Vec<usize>, class_names: Vec<String>) -> PyResult<Self> {
        let inner = metrics::confusion_from_predictions(&truth, &predicted, class_names).map_err(to_py)?;
        Ok(PyConfusionMatrix { inner })
    }

    #[getter]
    fn counts(&self) -> Vec<Vec<u64>> {
        self.inner.counts.clone()
    }

    fn accuracy(&self) -> PyResult<f64> {
        metrics::overall_accuracy(&self.inner).map_err(to_py)
    }

    /// One `(name, tp, fp, fn, precision, recall, f1)` tuple per class.
    #[allow(clippy::type_complexity)]
    fn metrics(&self) -> Vec<(String, u64, u64, u64, Option<f64>, Option<f64>, Option<f64>)> {
        metrics::class_metrics(&self.inner)
            .into_iter()
            .zip(&self.inner.class_names)
            .map(|(m, name)| (name.clone(), m.tp, m.fp, m.r#fn, m.precision, m.recall, m.f1))
            .collect()
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }

    fn metrics_csv(&self) -> String {
        metrics::metrics_csv(&self.inner)
    }

    fn __repr__(&self) -> String {
        format!("ConfusionMatrix({:?})", self.inner.counts)
    }
}

#[pyclass(name = "Head", module = "spinalxfer_py")]
struct PyHead {
    inner: heads::Head<f32>,
}

#[pymethods]
impl PyHead {
    #[staticmethod]
    #[pyo3(signature = (input_dim, width, sublayers, classes, seed=0, second_half_first=false))]
    fn spinal(
        input_dim: usize,
        width: usize,
        sublayers: usize,
        classes: usize,
        seed: u64,
        second_half_first: bool,
    ) -> PyResult<Self> {
        let cfg = SpinalHeadConfig {
            half_order: if second_half_first {
                HalfOrder::SecondHalfFirst
            } else {
                HalfOrder::FirstHalfFirst
            },
            ..SpinalHeadConfig::new(input_dim, width, sublayers, classes)
        };
        let inner = heads::head_init(&HeadConfig::Spinal(cfg), seed).map_err(to_py)?;
        Ok(PyHead { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (input_dim, hidden, classes, seed=0))]
    fn traditional(input_dim: usize, hidden: usize, classes: usize, seed: u64) -> PyResult<Self> {
        let cfg = TraditionalHeadConfig {
            input_dim,
            hidden,
            classes,
        };
        let inner = heads::head_init(&HeadConfig::Traditional(cfg), seed).map_err(to_py)?;
        Ok(PyHead { inner })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.config().kind_name()
    }

    #[getter]
    fn param_count(&self) -> usize {
        Parameterized::param_count(&self.inner)
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.named_params().into_iter().map(|(n, _)| n).collect()
    }

    /// Logits for a batch of feature rows.
    fn forward(&self, rows: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let x = Tensor::from_rows(&rows).map_err(to_py)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.inner.forward(&mut tape, xv).map_err(to_py)?;
        let c = tape.shape(out)[1];
        Ok(tape.value(out).chunks_exact(c).map(<[f32]>::to_vec).collect())
    }

    fn predict(&self, rows: Vec<Vec<f32>>) -> PyResult<Vec<usize>> {
        Ok(self.forward(rows)?.iter().map(|r| trainer::argmax(r)).collect())
    }

    fn to_checkpoint(&self) -> PyResult<PyCheckpoint> {
        let inner = Checkpoint::from_model(&self.inner).map_err(to_py)?;
        Ok(PyCheckpoint { inner })
    }
}

#[pyclass(name = "Checkpoint", module = "spinalxfer_py")]
struct PyCheckpoint {
    inner: Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[new]
    fn new() -> Self {
        PyCheckpoint {
            inner: Checkpoint::new(),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: Checkpoint::load(&path).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn decode(data: &[u8]) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: Checkpoint::decode(data).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    fn encode(&self) -> Vec<u8> {
        self.inner.encode()
    }

    /// Adds an f32 tensor, or f64 with `double=True`.
    #[pyo3(signature = (name, shape, data, double=false))]
    fn insert(&mut self, name: String, shape: Vec<usize>, data: Vec<f64>, double: bool) -> PyResult<()> {
        let result = if double {
            Tensor::new(shape, data).and_then(|t| self.inner.insert(name, t))
        } else {
            let data = data.into_iter().map(|v| v as f32).collect();
            Tensor::<f32>::new(shape, data).and_then(|t| self.inner.insert(name, t))
        };
        result.map_err(to_py)
    }

    /// `(shape, values)` of a tensor, values widened to float.
    fn get(&self, name: &str) -> Option<(Vec<usize>, Vec<f64>)> {
        self.inner.get(name).map(|t| match t {
            AnyTensor::F32(t) => (t.shape().to_vec(), t.data().iter().map(|&v| v as f64).collect()),
            AnyTensor::F64(t) => (t.shape().to_vec(), t.data().to_vec()),
        })
    }

    fn names(&self) -> Vec<String> {
        self.inner.names().map(str::to_string).collect()
    }

    fn crc(&self) -> u32 {
        self.inner.crc()
    }

    /// Entries whose names start with `prefix`.
    fn filtered(&self, prefix: &str) -> PyCheckpoint {
        PyCheckpoint {
            inner: self.inner.filtered(prefix),
        }
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __contains__(&self, name: &str) -> bool {
        self.inner.get(name).is_some()
    }
}

type IdxArrays = (Vec<usize>, (usize, usize, usize), Vec<f32>);

/// `(labels, (channels, height, width), pixels)` with pixels scaled to
/// `[0, 1]` in row-major order.
#[pyfunction]
fn load_idx(images: PathBuf, labels: PathBuf) -> PyResult<IdxArrays> {
    let set = spinalxfer::ingest::load_idx(&images, &labels).map_err(to_py)?;
    let shape = set.image_shape();
    Ok((set.labels, shape, set.images.into_vec()))
}

/// Runs `train <config>` and returns its summary line.
#[pyfunction]
fn train(py: Python<'_>, config: PathBuf) -> PyResult<String> {
    py.detach(|| runner::cmd_train(&config)).map_err(to_py)
}

/// Runs `evaluate <checkpoint> <dataset> <config>` and returns its summary line.
#[pyfunction]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, dataset: String, config: PathBuf) -> PyResult<String> {
    py.detach(|| runner::cmd_evaluate(&checkpoint, &dataset, &config)).map_err(to_py)
}

#[pymodule]
fn spinalxfer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SpinalError", m.py().get_type::<SpinalError>())?;
    m.add_class::<PyConfusionMatrix>()?;
    m.add_class::<PyHead>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(spinal_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(traditional_param_count, m)?)?;
    m.add_function(wrap_pyfunction!(step_lr, m)?)?;
    m.add_function(wrap_pyfunction!(lr_trace, m)?)?;
    m.add_function(wrap_pyfunction!(class_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}

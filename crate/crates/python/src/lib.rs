//! Python bindings: tensors, transforms, feature losses, datasets, models and the
//! experiment runner.

// The pymethods expansion converts `PyErr` into itself; keyword-heavy Python
// signatures map onto long Rust parameter lists.
#![allow(clippy::useless_conversion, clippy::too_many_arguments)]

use featkd_core::cli::{self, RunConfig};
use featkd_core::data::{gen_dataset, Dataset as CoreDataset, DatasetSpec};
use featkd_core::distill::{feat_cwd_loss, feat_kl_loss, feat_l2_loss, DistillConfig, LossKind};
use featkd_core::models::{build_model, Model as CoreModel, ModelSpec, Task};
use featkd_core::nn::{TransformKind, TransformModule};
use featkd_core::train::{
    eval_metrics, load_checkpoint, save_checkpoint, train_run, Distiller, ExperimentReport, TrainConfig,
};
use featkd_core::{Error, Tape, Tensor as CoreTensor, Var};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: Error) -> PyErr {
    match e {
        Error::Divergence { .. } | Error::Io(_) | Error::Format(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse<T: std::str::FromStr<Err = Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

/// Dense float64 tensor of rank 1 to 4, row-major.
#[pyclass(module = "featkd")]
#[derive(Clone)]
struct Tensor(CoreTensor);

#[pymethods]
impl Tensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        CoreTensor::new(&shape, data).map(Tensor).map_err(err)
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Tensor(CoreTensor::zeros(&shape))
    }

    #[staticmethod]
    #[pyo3(signature = (shape, std = 1.0, seed = 0))]
    fn randn(shape: Vec<usize>, std: f64, seed: u64) -> Self {
        Tensor(CoreTensor::randn(&shape, std, &mut ChaCha8Rng::seed_from_u64(seed)))
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.0.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.0.data().to_vec()
    }

    fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.0.max_abs_diff(&other.0)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.0.shape())
    }
}

type LossFn = fn(&mut Tape, Var, Var, f64) -> featkd_core::Result<Var>;

/// Loss value and its gradient with respect to the student features.
fn loss_and_grad(f: LossFn, s: &Tensor, t: &Tensor, temperature: f64) -> PyResult<(f64, Tensor)> {
    let mut tape = Tape::new();
    let sv = tape.variable(s.0.clone());
    let tv = tape.constant(t.0.clone());
    let l = f(&mut tape, sv, tv, temperature).map_err(err)?;
    tape.backward(l).map_err(err)?;
    let value = tape.value(l).item().map_err(err)?;
    let grad = tape.grad(sv).cloned().unwrap_or_else(|| CoreTensor::zeros(s.0.shape()));
    Ok((value, Tensor(grad)))
}

/// Mean squared feature distance per sample; returns `(loss, d loss / d student)`.
#[pyfunction]
fn l2_loss(student: &Tensor, teacher: &Tensor) -> PyResult<(f64, Tensor)> {
    loss_and_grad(|tp, s, t, _| feat_l2_loss(tp, s, t), student, teacher, 1.0)
}

/// KL over each sample's flattened features at `temperature`; returns `(loss, grad)`.
#[pyfunction]
#[pyo3(signature = (student, teacher, temperature = 4.0))]
fn kl_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> PyResult<(f64, Tensor)> {
    loss_and_grad(feat_kl_loss, student, teacher, temperature)
}

/// Channel-wise KL over spatial softmaxes at `temperature`; returns `(loss, grad)`.
#[pyfunction]
#[pyo3(signature = (student, teacher, temperature = 4.0))]
fn cwd_loss(student: &Tensor, teacher: &Tensor, temperature: f64) -> PyResult<(f64, Tensor)> {
    loss_and_grad(feat_cwd_loss, student, teacher, temperature)
}

/// Learnable map from student features to the teacher's feature space.
#[pyclass(module = "featkd")]
struct Transform(TransformModule);

#[pymethods]
impl Transform {
    #[new]
    #[pyo3(signature = (kind, c_in, c_out, hidden = None, seed = 0))]
    fn new(kind: &str, c_in: usize, c_out: usize, hidden: Option<usize>, seed: u64) -> PyResult<Self> {
        TransformModule::new(parse::<TransformKind>(kind)?, c_in, c_out, hidden, seed)
            .map(Transform)
            .map_err(err)
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.0.kind.name()
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.params.iter().map(|p| p.value.len()).sum()
    }

    fn zero_output_layer(&mut self) {
        self.0.zero_output_layer();
    }

    fn __call__(&self, x: &Tensor) -> PyResult<Tensor> {
        self.0.apply(&x.0).map(Tensor).map_err(err)
    }
}

/// Synthetic shapes split: images `[N, 1, S, S]` with class or per-pixel labels.
#[pyclass(module = "featkd")]
#[derive(Clone)]
struct Dataset(CoreDataset);

#[pymethods]
impl Dataset {
    #[getter]
    fn task(&self) -> &'static str {
        self.0.task.name()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.0.num_classes()
    }

    fn batch(&self, indices: Vec<usize>) -> PyResult<(Tensor, Vec<usize>)> {
        self.0.batch(&indices).map(|(x, y)| (Tensor(x), y)).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

/// Generates disjoint `(train, val)` splits.
#[pyfunction]
#[pyo3(signature = (task, num_train, num_val, image_size = 16, noise_std = 0.1, seed = 0))]
fn make_dataset(
    task: &str,
    num_train: usize,
    num_val: usize,
    image_size: usize,
    noise_std: f64,
    seed: u64,
) -> PyResult<(Dataset, Dataset)> {
    let spec = DatasetSpec {
        task: parse::<Task>(task)?,
        image_size,
        num_train,
        num_val,
        noise_std,
        seed,
    };
    gen_dataset(&spec).map(|(a, b)| (Dataset(a), Dataset(b))).map_err(err)
}

fn records<'py>(py: Python<'py>, r: &ExperimentReport) -> PyResult<Bound<'py, PyList>> {
    let list = PyList::empty_bound(py);
    for e in &r.records {
        let d = PyDict::new_bound(py);
        d.set_item("epoch", e.epoch)?;
        d.set_item("lr", e.lr)?;
        d.set_item("task_loss", e.task_loss)?;
        d.set_item("feat_loss", e.feat_loss)?;
        d.set_item("val_metric", e.val_metric)?;
        list.append(d)?;
    }
    Ok(list)
}

/// Small convolutional classifier or segmenter.
#[pyclass(module = "featkd")]
#[derive(Clone)]
struct Model(CoreModel);

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (task, stage_channels, num_classes, tap = None, seed = 0, in_channels = 1))]
    fn new(
        task: &str,
        stage_channels: Vec<usize>,
        num_classes: usize,
        tap: Option<usize>,
        seed: u64,
        in_channels: usize,
    ) -> PyResult<Self> {
        let tap = tap.unwrap_or(stage_channels.len().saturating_sub(1));
        let spec = ModelSpec {
            task: parse::<Task>(task)?,
            in_channels,
            stage_channels,
            num_classes,
            tap,
            seed,
        };
        build_model(&spec).map(Model).map_err(err)
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.0.spec.num_params()
    }

    #[getter]
    fn tap_channels(&self) -> usize {
        self.0.spec.tap_channels()
    }

    /// Returns `(logits, [features at each requested stage])`.
    #[pyo3(signature = (x, taps = None))]
    fn infer(&self, x: &Tensor, taps: Option<Vec<usize>>) -> PyResult<(Tensor, Vec<Tensor>)> {
        let taps = taps.unwrap_or_else(|| vec![self.0.spec.tap]);
        let (logits, feats) = self.0.infer(&x.0, &taps).map_err(err)?;
        Ok((Tensor(logits), feats.into_iter().map(Tensor).collect()))
    }

    /// Top-1 accuracy (classification) or mean IoU (segmentation).
    fn evaluate(&self, data: &Dataset) -> PyResult<f64> {
        eval_metrics(&self.0, &data.0).map_err(err)
    }

    /// Plain supervised training; returns the per-epoch log.
    #[pyo3(signature = (train, val, epochs = 30, batch_size = 32, lr = 0.05, seed = 0))]
    fn fit<'py>(
        &mut self,
        py: Python<'py>,
        train: &Dataset,
        val: &Dataset,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyList>> {
        let cfg = schedule(epochs, batch_size, lr, seed, None);
        let r = py
            .allow_threads(|| train_run(&mut self.0, None, &train.0, &val.0, &cfg))
            .map_err(err)?;
        records(py, &r)
    }

    /// Trains against a frozen `teacher` with a feature loss on each model's tap.
    #[pyo3(signature = (teacher, train, val, transform = "mlp", loss = "l2", alpha = 1e-3, temperature = 4.0, epochs = 30, batch_size = 32, lr = 0.05, seed = 0))]
    fn distill<'py>(
        &mut self,
        py: Python<'py>,
        teacher: &Model,
        train: &Dataset,
        val: &Dataset,
        transform: &str,
        loss: &str,
        alpha: f64,
        temperature: f64,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<Bound<'py, PyList>> {
        let dc = DistillConfig {
            transform: parse::<TransformKind>(transform)?,
            loss: parse::<LossKind>(loss)?,
            alpha,
            temperature,
            ..Default::default()
        };
        let mut d = Distiller::new(teacher.0.clone(), &self.0.spec, &dc, seed).map_err(err)?;
        let cfg = schedule(epochs, batch_size, lr, seed, Some(dc));
        let r = py
            .allow_threads(|| train_run(&mut self.0, Some(&mut d), &train.0, &val.0, &cfg))
            .map_err(err)?;
        records(py, &r)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyBytes>> {
        let mut buf = Vec::new();
        save_checkpoint(&mut buf, &self.0).map_err(err)?;
        Ok(PyBytes::new_bound(py, &buf))
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        load_checkpoint(data).map(Model).map_err(err)
    }
}

/// Constant learning rate, no decay steps: the Python API leaves scheduling to callers.
fn schedule(epochs: usize, batch_size: usize, lr: f64, seed: u64, distill: Option<DistillConfig>) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size,
        base_lr: lr,
        lr_decay_epochs: vec![],
        seed,
        distill,
        ..Default::default()
    }
}

/// Resolved experiment configuration in the `key = value` format the CLI reads.
#[pyclass(module = "featkd")]
struct Config(RunConfig);

#[pymethods]
impl Config {
    #[new]
    #[pyo3(signature = (text = "", overrides = Vec::new()))]
    fn new(text: &str, overrides: Vec<String>) -> PyResult<Self> {
        RunConfig::parse(text, &overrides).map(Config).map_err(err)
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.0.set(key, value).map_err(err)?;
        self.0.validate().map_err(err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    /// Runs `train`, `ablate`, `sweep-alpha`, `collapse` or `diag-l2`, writing outputs
    /// under the configured directory; returns the report as a dict.
    fn run<'py>(&self, py: Python<'py>, command: &str) -> PyResult<Bound<'py, PyAny>> {
        let cfg = &self.0;
        let report = py
            .allow_threads(|| match command {
                "train" => cli::cmd_train(cfg),
                "ablate" => cli::cmd_ablate(cfg),
                "sweep-alpha" => cli::cmd_sweep_alpha(cfg),
                "collapse" => cli::cmd_collapse(cfg),
                "diag-l2" => cli::cmd_diag_l2(cfg),
                other => Err(Error::Config(format!(
                    "unknown command '{other}', expected one of: train, ablate, sweep-alpha, collapse, diag-l2"
                ))),
            })
            .map_err(err)?;
        py.import_bound("json")?.call_method1("loads", (report.to_string(),))
    }
}

#[pymodule]
fn featkd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tensor>()?;
    m.add_class::<Transform>()?;
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_class::<Config>()?;
    m.add_function(wrap_pyfunction!(l2_loss, m)?)?;
    m.add_function(wrap_pyfunction!(kl_loss, m)?)?;
    m.add_function(wrap_pyfunction!(cwd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(make_dataset, m)?)?;
    Ok(())
}

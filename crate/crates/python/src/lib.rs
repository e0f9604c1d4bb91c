//! Python bindings: schedules, pruning, distillation loss, recipes, runs and
//! checkpoints. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use gradprune_core::distillation::{self, KdConfig, TeacherHandle};
use gradprune_core::harness::{self, RunSetup, StudentInit};
use gradprune_core::models::{self, SyntheticTask};
use gradprune_core::numerics::{ParamSet, Tensor};
use gradprune_core::pruning::{self, DistributionPolicy, MaskSet, PrunableSet};
use gradprune_core::recipes;
use gradprune_core::schedules::{self, LrScheduleParams, SparsityScheduleParams};

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn json_to_py<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

fn sparsity_params(
    initial: f64,
    final_: f64,
    total_epochs: usize,
    head_freeze_epochs: usize,
    tail_freeze_epochs: usize,
    frequency: usize,
    steps_per_epoch: usize,
) -> SparsityScheduleParams {
    SparsityScheduleParams {
        initial_sparsity: initial,
        final_sparsity: final_,
        total_epochs,
        head_freeze_epochs,
        tail_freeze_epochs,
        prune_frequency_per_epoch: frequency,
        steps_per_epoch,
    }
}

/// Target sparsity in force at `step` of a cubic schedule.
#[pyfunction]
#[pyo3(signature = (step, *, initial, final_, total_epochs, head_freeze_epochs, tail_freeze_epochs, frequency, steps_per_epoch))]
#[allow(clippy::too_many_arguments)]
fn sparsity_at(
    step: usize,
    initial: f64,
    final_: f64,
    total_epochs: usize,
    head_freeze_epochs: usize,
    tail_freeze_epochs: usize,
    frequency: usize,
    steps_per_epoch: usize,
) -> PyResult<f64> {
    let p = sparsity_params(
        initial,
        final_,
        total_epochs,
        head_freeze_epochs,
        tail_freeze_epochs,
        frequency,
        steps_per_epoch,
    );
    schedules::sparsity_at(&p, step).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (*, initial, final_, total_epochs, head_freeze_epochs, tail_freeze_epochs, frequency, steps_per_epoch))]
fn prune_event_steps(
    initial: f64,
    final_: f64,
    total_epochs: usize,
    head_freeze_epochs: usize,
    tail_freeze_epochs: usize,
    frequency: usize,
    steps_per_epoch: usize,
) -> PyResult<Vec<usize>> {
    let p = sparsity_params(
        initial,
        final_,
        total_epochs,
        head_freeze_epochs,
        tail_freeze_epochs,
        frequency,
        steps_per_epoch,
    );
    schedules::prune_event_steps(&p).map_err(value_err)
}

/// Cyclic linear learning rate at `step`.
#[pyfunction]
#[pyo3(signature = (step, *, lr_init, lr_final, cycle_length_epochs, total_epochs, steps_per_epoch))]
fn lr_at(
    step: usize,
    lr_init: f64,
    lr_final: f64,
    cycle_length_epochs: f64,
    total_epochs: usize,
    steps_per_epoch: usize,
) -> PyResult<f64> {
    let p = LrScheduleParams {
        lr_init,
        lr_final,
        cycle_length_epochs,
        total_epochs,
        steps_per_epoch,
    };
    schedules::lr_at(&p, step).map_err(value_err)
}

#[pyfunction]
fn soften(logits: Vec<f64>, temperature: f64) -> PyResult<Vec<f64>> {
    distillation::soften(&logits, temperature).map_err(value_err)
}

#[pyfunction]
fn entropy(probs: Vec<f64>) -> f64 {
    distillation::entropy(&probs)
}

/// Distillation loss for row-major `[batch, classes]` logits.
#[pyfunction]
#[pyo3(signature = (student, teacher, labels, classes, *, hardness = 1.0, temperature = 5.5, kl_scaling = true))]
fn kd_loss(
    student: Vec<f64>,
    teacher: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
    hardness: f64,
    temperature: f64,
    kl_scaling: bool,
) -> PyResult<f64> {
    let cfg = KdConfig {
        hardness,
        temperature,
        kl_scaling,
    };
    distillation::kd_loss_value(&student, &teacher, &labels, classes, &cfg).map_err(value_err)
}

/// Extends masks to `target` sparsity. `tensors` is a list of
/// `(name, shape, values)`; names follow the model convention
/// (`encoder.*.weight`, 2-D). `keep` holds the current keep flags per
/// tensor, or `None` for dense. Returns the new keep flags.
#[pyfunction]
#[pyo3(signature = (tensors, target, policy = "uniform", keep = None))]
fn magnitude_prune(
    tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
    target: f64,
    policy: &str,
    keep: Option<Vec<Vec<bool>>>,
) -> PyResult<Vec<Vec<bool>>> {
    let policy = match policy {
        "uniform" => DistributionPolicy::Uniform,
        "global" => DistributionPolicy::Global,
        other => return Err(PyValueError::new_err(format!("unknown policy `{other}`"))),
    };
    let mut params = ParamSet::new();
    for (name, shape, values) in &tensors {
        let t = Tensor::new(shape.clone(), values.clone()).map_err(value_err)?;
        params.insert(name.clone(), t).map_err(value_err)?;
    }
    let names: Vec<&str> = tensors.iter().map(|(n, _, _)| n.as_str()).collect();
    let set = PrunableSet::new(&params, &names).map_err(value_err)?;
    let masks = match keep {
        None => MaskSet::ones(&set),
        Some(flags) => {
            if flags.len() != tensors.len() {
                return Err(PyValueError::new_err("keep must have one entry per tensor"));
            }
            let entries = tensors
                .iter()
                .zip(flags)
                .map(|((n, s, _), k)| (n.clone(), s.clone(), k))
                .collect();
            MaskSet::from_keep(entries).map_err(value_err)?
        }
    };
    let next = pruning::magnitude_prune(&params, &masks, target, policy).map_err(value_err)?;
    Ok((0..tensors.len()).map(|i| next.keep(i).to_vec()).collect())
}

/// A validated training recipe.
#[pyclass(name = "Recipe", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyRecipe {
    inner: recipes::Recipe,
}

#[pymethods]
impl PyRecipe {
    #[staticmethod]
    fn bundled(name: &str) -> PyResult<Self> {
        recipes::bundled(name)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    #[staticmethod]
    fn bundled_names() -> Vec<&'static str> {
        recipes::BUNDLED.iter().map(|(n, _)| *n).collect()
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        recipes::parse_recipe(text)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    /// Copy with the dotted `path` set to a JSON-encoded value.
    fn with_field(&self, path: &str, value_json: &str) -> PyResult<Self> {
        let value = serde_json::from_str(value_json).map_err(value_err)?;
        harness::set_field(&self.inner, path, value)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    /// Differences from the reference constants, one line per field.
    fn audit(&self) -> Vec<String> {
        recipes::audit_recipe(&self.inner)
            .diffs
            .iter()
            .map(ToString::to_string)
            .collect()
    }

    /// `step,lr,target_sparsity` CSV.
    fn emit_schedule(&self, steps_per_epoch: usize) -> PyResult<String> {
        harness::emit_schedule(&self.inner, steps_per_epoch).map_err(value_err)
    }

    /// `(step, index, target)` for every prune event.
    fn prune_events(&self, steps_per_epoch: usize) -> PyResult<Vec<(usize, usize, f64)>> {
        let tl = recipes::compile_timeline(&self.inner, steps_per_epoch).map_err(value_err)?;
        Ok(tl.prune_events().collect())
    }

    fn __repr__(&self) -> String {
        format!("Recipe(name={:?}, hash={})", self.inner.name, &self.inner.hash()[..12])
    }
}

/// Saved model parameters, masks and metadata.
#[pyclass(name = "Checkpoint", frozen)]
struct PyCheckpoint {
    inner: models::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        models::Checkpoint::load(&path)
            .map(|inner| Self { inner })
            .map_err(value_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(value_err)
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.model.params().names().map(str::to_string).collect()
    }

    /// `(shape, values)` of a parameter.
    fn param(&self, name: &str) -> PyResult<(Vec<usize>, Vec<f64>)> {
        let t = self
            .inner
            .model
            .params()
            .get(name)
            .ok_or_else(|| PyValueError::new_err(format!("no parameter `{name}`")))?;
        Ok((t.shape().to_vec(), t.data().to_vec()))
    }

    #[getter]
    fn sparsity(&self) -> f64 {
        self.inner.masks.as_ref().map_or(0.0, MaskSet::sparsity)
    }

    #[getter]
    fn validation_accuracy(&self) -> Option<f64> {
        self.inner.metadata.validation_accuracy
    }

    #[getter]
    fn step(&self) -> u64 {
        self.inner.metadata.step
    }
}

/// Task from a JSON object of overrides on the default task.
fn parse_task(task_json: Option<&str>) -> PyResult<SyntheticTask> {
    let mut doc = serde_json::to_value(SyntheticTask::default()).expect("task serializes");
    if let Some(text) = task_json {
        let overrides: serde_json::Map<String, serde_json::Value> =
            serde_json::from_str(text).map_err(value_err)?;
        doc.as_object_mut().expect("task is an object").extend(overrides);
    }
    let task: SyntheticTask = serde_json::from_value(doc).map_err(value_err)?;
    task.validate().map_err(value_err)?;
    Ok(task)
}

/// Trains a dense teacher on the synthetic task (`task_json` overrides
/// default fields) and saves it to `out`. Returns the validation accuracy.
#[pyfunction]
#[pyo3(signature = (out, task_json = None, epochs = 5, batch_size = 16, lr = 3e-3, seed = 0))]
fn train_teacher(
    py: Python<'_>,
    out: PathBuf,
    task_json: Option<&str>,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> PyResult<f64> {
    let task = parse_task(task_json)?;
    let cfg = harness::default_model_for(&task);
    let training = models::TeacherTraining {
        epochs,
        batch_size,
        lr,
        weight_decay: 0.0,
        seed,
    };
    py.detach(|| -> Result<f64, String> {
        let ckpt = models::train_teacher(&task, &cfg, &training).map_err(|e| e.to_string())?;
        ckpt.save(&out).map_err(|e| e.to_string())?;
        Ok(ckpt.metadata.validation_accuracy.unwrap_or(f64::NAN))
    })
    .map_err(PyRuntimeError::new_err)
}

/// Runs a recipe and writes its outputs to `out`. Returns the run summary.
#[pyfunction]
#[pyo3(signature = (recipe, out, seed = 0, task_json = None, init = None, teacher = None))]
fn run<'py>(
    py: Python<'py>,
    recipe: &PyRecipe,
    out: PathBuf,
    seed: u64,
    task_json: Option<&str>,
    init: Option<PathBuf>,
    teacher: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let task = parse_task(task_json)?;
    let student = match init.or_else(|| recipe.inner.mask_source.as_ref().map(PathBuf::from)) {
        Some(dir) => StudentInit::Checkpoint(Box::new(models::Checkpoint::load(&dir).map_err(value_err)?)),
        None => StudentInit::Scratch(harness::default_model_for(&task)),
    };
    let teacher = teacher
        .map(|p| TeacherHandle::load(&p))
        .transpose()
        .map_err(value_err)?;
    let setup = RunSetup {
        recipe: recipe.inner.clone(),
        task,
        student,
        seed,
    };
    let summary = py
        .detach(|| {
            harness::run_to_dir(&setup, teacher.as_ref(), &out)
                .map(|o| serde_json::to_string(&o.metrics.summary).expect("summary serializes"))
                .map_err(|e| e.record().to_string())
        })
        .map_err(PyRuntimeError::new_err)?;
    json_to_py(py, &summary)
}

#[pymodule]
fn gradprune(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(sparsity_at, m)?)?;
    m.add_function(wrap_pyfunction!(prune_event_steps, m)?)?;
    m.add_function(wrap_pyfunction!(lr_at, m)?)?;
    m.add_function(wrap_pyfunction!(soften, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(kd_loss, m)?)?;
    m.add_function(wrap_pyfunction!(magnitude_prune, m)?)?;
    m.add_function(wrap_pyfunction!(train_teacher, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_class::<PyRecipe>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add("RECIPE_SCHEMA", recipes::SCHEMA)?;
    Ok(())
}

//! Training runs driven by compiled timelines, sweeps, and their on-disk
//! outputs.

mod metrics;
mod sweep;

pub use metrics::{MetricRecord, RunMetrics, RunSummary, METRICS_HEADER};
pub use sweep::{set_field, sweep, SweepRow, SweepSpec, SweepTable};

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use thiserror::Error;

use crate::distillation::{kd_loss, DistillError, DistributionStat, TeacherHandle};
use crate::models::{
    build_model, generate_task, Checkpoint, CheckpointError, CheckpointMetadata, Model, ModelConfig,
    ModelError, SyntheticTask, TaskError,
};
use crate::numerics::{AdamConfig, NumericsError, OptimizerState, Tape};
use crate::pruning::{
    apply_masks, magnitude_prune, mask_grads, DistributionPolicy, MaskSet, PrunableSet, PruningError,
};
use crate::recipes::{compile_timeline, Recipe, RecipeError, Stage, Timeline};

/// Marker file present while an output directory is being written.
pub const INCOMPLETE_SENTINEL: &str = ".incomplete";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("non-finite loss {loss} at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error("mask regression at step {step}: a pruned entry was restored")]
    MaskRegression { step: usize },
    #[error("recipe uses distillation (hardness {0}) but no teacher was given")]
    MissingTeacher(f64),
    #[error("fixed-mask stage needs an initial checkpoint with masks")]
    MissingMasks,
    #[error("{0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error(transparent)]
    Recipe(#[from] RecipeError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pruning(#[from] PruningError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl HarnessError {
    /// Short machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Diverged { .. } => "diverged",
            Self::MaskRegression { .. } => "mask_regression",
            Self::MissingTeacher(_) => "missing_teacher",
            Self::MissingMasks => "missing_masks",
            Self::Invalid(_) => "invalid",
            Self::Io { .. } => "io",
            Self::Recipe(_) => "recipe",
            Self::Task(_) => "task",
            Self::Model(_) => "model",
            Self::Pruning(_) => "pruning",
            Self::Distill(_) => "distillation",
            Self::Numerics(_) => "numerics",
            Self::Checkpoint(_) => "checkpoint",
        }
    }

    /// JSON error record written to `error.json` and stderr.
    pub fn record(&self) -> serde_json::Value {
        let step = match self {
            Self::Diverged { step, .. } | Self::MaskRegression { step } => Some(*step),
            _ => None,
        };
        json!({ "error": self.kind(), "message": self.to_string(), "step": step })
    }
}

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), HarnessError> {
    fs::write(path, contents).map_err(io_err(path))
}

/// Where the student's initial parameters come from.
#[derive(Debug, Clone)]
pub enum StudentInit {
    /// Fresh parameters; the run seed replaces the config seed.
    Scratch(ModelConfig),
    /// Parameters (and masks, if any) of an existing checkpoint.
    Checkpoint(Box<Checkpoint>),
}

#[derive(Debug, Clone)]
pub struct RunSetup {
    pub recipe: Recipe,
    pub task: SyntheticTask,
    pub student: StudentInit,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub metrics: RunMetrics,
    pub checkpoint: Checkpoint,
}

/// Default student architecture sized to a task.
pub fn default_model_for(task: &SyntheticTask) -> ModelConfig {
    ModelConfig::from(crate::models::TinyEncoderConfig {
        vocab_size: task.vocab_size,
        max_sequence_length: task.sequence_length,
        num_classes: task.num_classes,
        ..Default::default()
    })
}

struct Accumulator {
    loss: f64,
    ce: f64,
    kl: f64,
    n: usize,
}

impl Accumulator {
    fn new() -> Self {
        Self {
            loss: 0.0,
            ce: 0.0,
            kl: 0.0,
            n: 0,
        }
    }

    fn mean(&self) -> (f64, f64, f64) {
        let n = self.n.max(1) as f64;
        (self.loss / n, self.ce / n, self.kl / n)
    }
}

/// Executes a recipe on a task: at each step, prune if an event is due,
/// then forward, distillation loss, backward, zero masked gradients and
/// take an AdamW step at the scheduled rate. Validation runs at the
/// timeline's evaluation points.
pub fn run(setup: &RunSetup, teacher: Option<&TeacherHandle>) -> Result<RunOutcome, HarnessError> {
    let recipe = &setup.recipe;
    recipe.validate()?;
    let (train, val) = generate_task(&setup.task)?;
    let steps_per_epoch = train.len().div_ceil(recipe.batch_size);
    let timeline = compile_timeline(recipe, steps_per_epoch)?;

    let (mut model, init_masks) = match &setup.student {
        StudentInit::Scratch(cfg) => (build_model(cfg.with_seed(setup.seed))?, None),
        StudentInit::Checkpoint(ckpt) => {
            let mut model = ckpt.model.clone();
            model.params_mut().set_requires_grad(true);
            (model, ckpt.masks.clone())
        }
    };
    if model.config().num_classes() != setup.task.num_classes {
        return Err(HarnessError::Invalid(format!(
            "model has {} classes, task has {}",
            model.config().num_classes(),
            setup.task.num_classes
        )));
    }
    let prunable = PrunableSet::from_params(model.params());
    let mut masks = match (recipe.stage, init_masks) {
        (Stage::UpstreamFinetune, Some(m)) => Some(m),
        (Stage::UpstreamFinetune, None) => return Err(HarnessError::MissingMasks),
        (_, Some(m)) if recipe.sparsity.is_some() => Some(m),
        (_, _) if recipe.sparsity.is_some() => Some(MaskSet::ones(&prunable)),
        (_, m) => m,
    };
    if let Some(m) = &masks {
        apply_masks(model.params_mut(), m)?;
    }
    let policy = recipe
        .sparsity
        .map(|s| s.distribution)
        .unwrap_or(DistributionPolicy::Uniform);

    let teacher_logits = if recipe.kd.uses_teacher() {
        let t = teacher.ok_or(HarnessError::MissingTeacher(recipe.kd.hardness))?;
        if t.model().config().num_classes() != setup.task.num_classes {
            return Err(HarnessError::Invalid("teacher and task class counts differ".into()));
        }
        Some(t.dataset_logits(&train)?)
    } else {
        None
    };
    let classes = setup.task.num_classes;

    let mut opt = OptimizerState::new(
        model.params(),
        AdamConfig::with_weight_decay(recipe.weight_decay),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(setup.seed);
    rng.set_stream(3);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    let mut evals = timeline.evaluation_steps().peekable();
    let mut acc = Accumulator::new();
    let mut step = 0;

    for _ in 0..recipe.total_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(recipe.batch_size) {
            if let Some(target) = timeline.prune_target_at(step) {
                let m = masks.as_ref().expect("prune events imply masks");
                let next = magnitude_prune(model.params(), m, target, policy)?;
                if !next.contains_zeros_of(m) {
                    return Err(HarnessError::MaskRegression { step });
                }
                reset_pruned_moments(&model, m, &next, &mut opt);
                apply_masks(model.params_mut(), &next)?;
                masks = Some(next);
            }

            let (tokens, labels) = train.gather(batch);
            let t_rows: Vec<f64> = match &teacher_logits {
                Some(all) => batch
                    .iter()
                    .flat_map(|&i| all[i * classes..(i + 1) * classes].iter().copied())
                    .collect(),
                None => Vec::new(),
            };
            let mut tape = Tape::new();
            let (logits, vars) = model.forward(&mut tape, &tokens, batch.len())?;
            if !tape.value(logits).is_finite() {
                return Err(HarnessError::Diverged {
                    step,
                    loss: f64::NAN,
                });
            }
            let out = kd_loss(&mut tape, logits, &t_rows, &labels, &recipe.kd)?;
            let loss = tape.value(out.loss).item();
            if !loss.is_finite() {
                return Err(HarnessError::Diverged { step, loss });
            }
            let grads = tape.backward(out.loss)?;
            drop(tape);
            model.params_mut().store_grads(&vars, &grads);
            if let Some(m) = &masks {
                mask_grads(model.params_mut(), m)?;
            }
            opt.step(model.params_mut(), timeline.lr()[step])?;
            if let Some(m) = &masks {
                apply_masks(model.params_mut(), m)?;
            }
            acc.loss += loss;
            acc.ce += out.ce_term;
            acc.kl += out.kl_term;
            acc.n += 1;

            if evals.peek() == Some(&step) {
                evals.next();
                let (train_loss, ce_term, kl_term) = acc.mean();
                acc = Accumulator::new();
                records.push(MetricRecord {
                    step: step + 1,
                    epoch: (step + 1) as f64 / steps_per_epoch as f64,
                    lr: timeline.lr()[step],
                    target_sparsity: timeline.targets()[step],
                    achieved_sparsity: masks.as_ref().map_or(0.0, MaskSet::sparsity),
                    train_loss,
                    ce_term,
                    kl_term,
                    val_accuracy: model.accuracy(&val)?,
                });
            }
            step += 1;
        }
    }

    let last = records.last().expect("final epoch end is an evaluation point");
    let summary = RunSummary {
        recipe: recipe.name.clone(),
        recipe_hash: recipe.hash(),
        seed: setup.seed,
        steps: step,
        steps_per_epoch,
        final_accuracy: last.val_accuracy,
        best_accuracy: records.iter().map(|r| r.val_accuracy).fold(f64::MIN, f64::max),
        final_sparsity: last.achieved_sparsity,
        target_sparsity: recipe.sparsity.map_or(0.0, |s| s.final_sparsity),
        kd: recipe.kd,
        prunable_count: prunable.total(),
    };
    let metadata = CheckpointMetadata {
        recipe_hash: Some(summary.recipe_hash.clone()),
        step: step as u64,
        achieved_sparsity: summary.final_sparsity,
        validation_accuracy: Some(summary.final_accuracy),
    };
    let checkpoint = Checkpoint::new(model, masks, metadata)?;
    Ok(RunOutcome {
        metrics: RunMetrics { records, summary },
        checkpoint,
    })
}

fn reset_pruned_moments(model: &Model, before: &MaskSet, after: &MaskSet, opt: &mut OptimizerState) {
    for (i, name) in after.names().iter().enumerate() {
        let index = model.params().index_of(name).expect("mask names are parameters");
        let newly = after
            .keep(i)
            .iter()
            .zip(before.keep(i))
            .enumerate()
            .filter(|(_, (now, was))| !**now && **was)
            .map(|(e, _)| e);
        opt.reset_entries(index, newly);
    }
}

/// Runs and writes `metrics.csv`, `summary.json` and `checkpoint/` into
/// `out`. A sentinel file marks the directory until everything is written;
/// failures leave it in place next to `error.json`.
pub fn run_to_dir(
    setup: &RunSetup,
    teacher: Option<&TeacherHandle>,
    out: &Path,
) -> Result<RunOutcome, HarnessError> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let sentinel = out.join(INCOMPLETE_SENTINEL);
    write_file(&sentinel, b"")?;
    let result = run(setup, teacher).and_then(|outcome| {
        write_run_outputs(&outcome, out)?;
        Ok(outcome)
    });
    match &result {
        Ok(_) => fs::remove_file(&sentinel).map_err(io_err(&sentinel))?,
        Err(e) => {
            let text = serde_json::to_string_pretty(&e.record()).expect("record serializes");
            write_file(&out.join("error.json"), text + "\n")?;
        }
    }
    result
}

pub fn write_run_outputs(outcome: &RunOutcome, out: &Path) -> Result<(), HarnessError> {
    write_file(&out.join("metrics.csv"), outcome.metrics.to_csv())?;
    let summary = serde_json::to_string_pretty(&outcome.metrics.summary).expect("summary serializes");
    write_file(&out.join("summary.json"), summary + "\n")?;
    outcome.checkpoint.save(&out.join("checkpoint"))?;
    Ok(())
}

/// `step,lr,target_sparsity` CSV of a recipe's compiled timeline.
pub fn emit_schedule(recipe: &Recipe, steps_per_epoch: usize) -> Result<String, HarnessError> {
    Ok(compile_timeline(recipe, steps_per_epoch)?.to_csv())
}

/// Compiles without running; convenience for callers that need both.
pub fn timeline_for(recipe: &Recipe, task: &SyntheticTask) -> Result<Timeline, HarnessError> {
    let steps_per_epoch = task.train_size.div_ceil(recipe.batch_size);
    Ok(compile_timeline(recipe, steps_per_epoch)?)
}

/// `sample_id,temperature,max_prob,entropy` CSV.
pub fn teacher_stats_csv(rows: &[DistributionStat]) -> String {
    let mut out = String::from("sample_id,temperature,max_prob,entropy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e}\n",
            r.sample_id, r.temperature, r.max_prob, r.entropy
        ));
    }
    out
}

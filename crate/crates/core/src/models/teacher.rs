use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{build_model, generate_task, Checkpoint, CheckpointMetadata, ModelConfig, ModelError, SyntheticTask, TaskError};
use crate::distillation::{cross_entropy, DistillError};
use crate::numerics::{AdamConfig, NumericsError, OptimizerState, Tape};
use crate::schedules::linear_decay_lr;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    Diverged { step: u64 },
    #[error("invalid training setup: {0}")]
    Invalid(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] DistillError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Dense cross-entropy training with AdamW and a linearly decaying rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TeacherTraining {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            lr: 3e-3,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

/// Trains a dense model on the task and returns it with its validation
/// accuracy recorded in the metadata.
pub fn train_teacher(
    task: &SyntheticTask,
    config: &ModelConfig,
    training: &TeacherTraining,
) -> Result<Checkpoint, TrainError> {
    if training.epochs == 0 || training.batch_size == 0 {
        return Err(TrainError::Invalid("epochs and batch_size must be positive".into()));
    }
    if !(training.lr > 0.0 && training.lr.is_finite()) {
        return Err(TrainError::Invalid(format!("lr {} is not a valid rate", training.lr)));
    }
    if config.num_classes() != task.num_classes || config.vocab_size() < task.vocab_size {
        return Err(TrainError::Invalid(
            "model classes/vocabulary do not cover the task".into(),
        ));
    }
    let (train, val) = generate_task(task)?;
    let mut model = build_model(config.clone())?;
    let mut opt = OptimizerState::new(model.params(), AdamConfig::with_weight_decay(training.weight_decay));
    let mut rng = ChaCha8Rng::seed_from_u64(training.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let per_epoch = train.len().div_ceil(training.batch_size);
    let total = per_epoch * training.epochs;
    let mut step = 0u64;
    for _ in 0..training.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(training.batch_size) {
            let (tokens, labels) = train.gather(idx);
            let mut tape = Tape::new();
            let (logits, vars) = model.forward(&mut tape, &tokens, idx.len())?;
            let loss = cross_entropy(&mut tape, logits, &labels)
                .map_err(|_| TrainError::Diverged { step })?;
            if !tape.value(loss).item().is_finite() {
                return Err(TrainError::Diverged { step });
            }
            let grads = tape.backward(loss)?;
            model.params_mut().store_grads(&vars, &grads);
            let lr = linear_decay_lr(training.lr, total, step as usize)
                .map_err(|e| TrainError::Invalid(e.to_string()))?;
            opt.step(model.params_mut(), lr)?;
            step += 1;
        }
    }
    let accuracy = model.accuracy(&val)?;
    Ok(Checkpoint::new(
        model,
        None,
        CheckpointMetadata {
            recipe_hash: None,
            step,
            achieved_sparsity: 0.0,
            validation_accuracy: Some(accuracy),
        },
    )
    .expect("dense checkpoint has no masks to check"))
}

//! Classifier models, synthetic datasets, checkpoints and teacher training.

mod checkpoint;
mod encoder;
mod mlp;
mod task;
mod teacher;

pub use checkpoint::{Checkpoint, CheckpointError, CheckpointMetadata};
pub use encoder::TinyEncoderConfig;
pub use mlp::MlpConfig;
pub use task::{generate_task, Dataset, SyntheticTask, TaskError, TaskKind};
pub use teacher::{train_teacher, TeacherTraining, TrainError};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{NumericsError, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model config: {field} {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("bad batch: {0}")]
    BadBatch(String),
    #[error("parameter set does not match the config: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Which part of the network a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Embedding,
    Encoder,
    Head,
}

/// Group of a parameter name, from its first path segment.
pub fn param_group(name: &str) -> Option<ParamGroup> {
    match name.split('.').next() {
        Some("embedding") => Some(ParamGroup::Embedding),
        Some("encoder") => Some(ParamGroup::Encoder),
        Some("head") => Some(ParamGroup::Head),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    TinyEncoder(TinyEncoderConfig),
    Mlp(MlpConfig),
}

impl From<TinyEncoderConfig> for ModelConfig {
    fn from(c: TinyEncoderConfig) -> Self {
        Self::TinyEncoder(c)
    }
}

impl From<MlpConfig> for ModelConfig {
    fn from(c: MlpConfig) -> Self {
        Self::Mlp(c)
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            Self::TinyEncoder(c) => c.validate(),
            Self::Mlp(c) => c.validate(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Self::TinyEncoder(c) => c.num_classes,
            Self::Mlp(c) => c.num_classes,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::TinyEncoder(c) => c.vocab_size,
            Self::Mlp(c) => c.vocab_size,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Self::TinyEncoder(c) => c.param_count(),
            Self::Mlp(c) => c.param_count(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Self::TinyEncoder(c) => c.seed,
            Self::Mlp(c) => c.seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        match &mut c {
            Self::TinyEncoder(e) => e.seed = seed,
            Self::Mlp(m) => m.seed = seed,
        }
        c
    }

    fn init_params(&self) -> Result<ParamSet, ModelError> {
        match self {
            Self::TinyEncoder(c) => c.init_params(),
            Self::Mlp(c) => c.init_params(),
        }
    }
}

/// A configuration together with its named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
}

/// Builds a freshly initialized model.
pub fn build_model(config: impl Into<ModelConfig>) -> Result<Model, ModelError> {
    let config = config.into();
    let params = config.init_params()?;
    Ok(Model { config, params })
}

impl Model {
    /// Wraps existing parameters after checking names and shapes against the
    /// config.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self, ModelError> {
        let reference = config.init_params()?;
        if reference.len() != params.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} tensors, found {}",
                reference.len(),
                params.len()
            )));
        }
        for ((rn, rt), (n, t)) in reference.iter().zip(params.iter()) {
            if rn != n || rt.shape() != t.shape() {
                return Err(ModelError::ParamMismatch(format!(
                    "expected `{rn}` {:?}, found `{n}` {:?}",
                    rt.shape(),
                    t.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn into_parts(self) -> (ModelConfig, ParamSet) {
        (self.config, self.params)
    }

    /// Records the forward pass on `tape`. Returns the logits and the leaf
    /// handles of every parameter in order.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        batch: usize,
    ) -> Result<(Var, Vec<Var>), ModelError> {
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size()) {
            return Err(ModelError::BadBatch(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size()
            )));
        }
        let binding = self.params.bind(tape);
        let logits = match &self.config {
            ModelConfig::TinyEncoder(c) => c.forward(tape, &binding, tokens, batch)?,
            ModelConfig::Mlp(c) => c.forward(tape, &binding, tokens, batch)?,
        };
        Ok((logits, binding.into_vars()))
    }

    /// Logits `[batch, num_classes]` without recording gradients.
    pub fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let (out, _) = self.forward(&mut tape, tokens, batch)?;
        Ok(tape.value(out).clone())
    }

    /// Logits for every example of `data`, row-major `[len, num_classes]`.
    pub fn dataset_logits(&self, data: &Dataset) -> Result<Vec<f64>, ModelError> {
        const CHUNK: usize = 64;
        let mut out = Vec::with_capacity(data.len() * self.config.num_classes());
        let mut start = 0;
        while start < data.len() {
            let end = (start + CHUNK).min(data.len());
            let tokens = &data.tokens()[start * data.sequence_length()..end * data.sequence_length()];
            out.extend_from_slice(self.logits(tokens, end - start)?.data());
            start = end;
        }
        Ok(out)
    }

    /// Fraction of `data` classified correctly (argmax, first index on ties).
    pub fn accuracy(&self, data: &Dataset) -> Result<f64, ModelError> {
        let logits = self.dataset_logits(data)?;
        Ok(accuracy_from_logits(&logits, data.labels(), self.config.num_classes()))
    }
}

pub fn accuracy_from_logits(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = logits
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    correct as f64 / labels.len() as f64
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

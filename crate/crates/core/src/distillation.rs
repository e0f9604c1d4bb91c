//! Distillation loss against a frozen teacher and teacher-distribution
//! diagnostics.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{Checkpoint, CheckpointError, Dataset, Model, ModelError};
use crate::numerics::{log_softmax_last, softmax_last, NumericsError, Tape, Tensor, Var};

/// Temperatures reported by default in teacher statistics.
pub const DEFAULT_TEMPERATURES: [f64; 5] = [0.5, 1.0, 2.0, 5.5, 8.5];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistillError {
    #[error("hardness {0} outside [0, 1]")]
    Hardness(f64),
    #[error("temperature {0} must be positive and finite")]
    Temperature(f64),
    #[error("{0} logits contain a non-finite value")]
    NonFinite(&'static str),
    #[error("logit shapes differ: student {student:?}, teacher {teacher}")]
    Shape { student: Vec<usize>, teacher: usize },
    #[error("label {label} outside 0..{classes}")]
    Label { label: usize, classes: usize },
    #[error("{0} must not be empty")]
    Empty(&'static str),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub hardness: f64,
    pub temperature: f64,
    /// Multiply the KL term by `temperature²`.
    #[serde(default = "default_kl_scaling")]
    pub kl_scaling: bool,
}

fn default_kl_scaling() -> bool {
    true
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            hardness: 1.0,
            temperature: 5.5,
            kl_scaling: true,
        }
    }
}

impl KdConfig {
    /// Plain cross-entropy training.
    pub fn none() -> Self {
        Self {
            hardness: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), DistillError> {
        if !(0.0..=1.0).contains(&self.hardness) {
            return Err(DistillError::Hardness(self.hardness));
        }
        check_temperature(self.temperature)
    }

    pub fn kl_scale(&self) -> f64 {
        if self.kl_scaling {
            self.temperature * self.temperature
        } else {
            1.0
        }
    }

    pub fn uses_teacher(&self) -> bool {
        self.hardness > 0.0
    }
}

fn check_temperature(t: f64) -> Result<(), DistillError> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(DistillError::Temperature(t))
    }
}

/// `softmax(logits / t)` of one logit vector.
pub fn soften(logits: &[f64], t: f64) -> Result<Vec<f64>, DistillError> {
    check_temperature(t)?;
    if logits.is_empty() {
        return Err(DistillError::Empty("logits"));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(DistillError::NonFinite("input"));
    }
    let scaled: Vec<f64> = logits.iter().map(|x| x / t).collect();
    Ok(softmax_last(&scaled, logits.len()))
}

/// Shannon entropy in nats; zero-probability entries contribute nothing.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn check_labels(labels: &[usize], classes: usize) -> Result<(), DistillError> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(&label) => Err(DistillError::Label { label, classes }),
        None => Ok(()),
    }
}

/// Mean cross-entropy of `[batch, classes]` logits against `labels`.
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, DistillError> {
    let shape = tape.value(logits).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(DistillError::Shape {
            student: shape,
            teacher: labels.len(),
        });
    }
    check_labels(labels, shape[1])?;
    if !tape.value(logits).is_finite() {
        return Err(DistillError::NonFinite("student"));
    }
    let lp = tape.log_softmax(logits);
    let picked = tape.pick(lp, labels)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// The recorded loss and its weighted parts.
#[derive(Debug, Clone, Copy)]
pub struct KdLoss {
    pub loss: Var,
    /// `(1 − h)·CE`.
    pub ce_term: f64,
    /// `h·scale·KL`.
    pub kl_term: f64,
}

/// `(1 − h)·CE(student, labels) + h·scale·KL(p_teacher ‖ p_student)` with
/// both distributions softened by the temperature, averaged over the batch.
/// Only `student` is differentiated; at `h = 0` the result is the
/// cross-entropy node itself.
pub fn kd_loss(
    tape: &mut Tape,
    student: Var,
    teacher_logits: &[f64],
    labels: &[usize],
    cfg: &KdConfig,
) -> Result<KdLoss, DistillError> {
    cfg.validate()?;
    let shape = tape.value(student).shape().to_vec();
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(DistillError::Shape {
            student: shape,
            teacher: teacher_logits.len(),
        });
    }
    let (batch, classes) = (shape[0], shape[1]);
    check_labels(labels, classes)?;
    if !tape.value(student).is_finite() {
        return Err(DistillError::NonFinite("student"));
    }
    if cfg.hardness == 0.0 {
        let ce = cross_entropy(tape, student, labels)?;
        let ce_term = tape.value(ce).item();
        return Ok(KdLoss {
            loss: ce,
            ce_term,
            kl_term: 0.0,
        });
    }
    if teacher_logits.len() != batch * classes {
        return Err(DistillError::Shape {
            student: shape,
            teacher: teacher_logits.len(),
        });
    }
    if teacher_logits.iter().any(|x| !x.is_finite()) {
        return Err(DistillError::NonFinite("teacher"));
    }

    let t = cfg.temperature;
    let scaled: Vec<f64> = teacher_logits.iter().map(|x| x / t).collect();
    let p_t = softmax_last(&scaled, classes);
    let log_p_t = log_softmax_last(&scaled, classes);
    let neg_entropy: f64 = p_t
        .iter()
        .zip(&log_p_t)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, lp)| p * lp)
        .sum();

    // KL = (1/B)·Σ p_t·(log p_t − log p_s)
    let s = tape.scale(student, 1.0 / t);
    let log_p_s = tape.log_softmax(s);
    let target = tape.constant(Tensor::from_parts(vec![batch, classes], p_t));
    let cross = tape.mul(log_p_s, target)?;
    let cross = tape.sum(cross);
    let kl = tape.scale(cross, -1.0 / batch as f64);
    let kl = tape.shift(kl, neg_entropy / batch as f64);
    let kl_weighted = tape.scale(kl, cfg.hardness * cfg.kl_scale());
    let kl_term = tape.value(kl_weighted).item();

    if cfg.hardness == 1.0 {
        return Ok(KdLoss {
            loss: kl_weighted,
            ce_term: 0.0,
            kl_term,
        });
    }
    let ce = cross_entropy(tape, student, labels)?;
    let ce_weighted = tape.scale(ce, 1.0 - cfg.hardness);
    let ce_term = tape.value(ce_weighted).item();
    let loss = tape.add(ce_weighted, kl_weighted)?;
    Ok(KdLoss {
        loss,
        ce_term,
        kl_term,
    })
}

/// Scalar value of [`kd_loss`] for row-major `[batch, classes]` logits.
pub fn kd_loss_value(
    student_logits: &[f64],
    teacher_logits: &[f64],
    labels: &[usize],
    classes: usize,
    cfg: &KdConfig,
) -> Result<f64, DistillError> {
    if classes == 0 || student_logits.len() != labels.len() * classes {
        return Err(DistillError::Shape {
            student: vec![student_logits.len()],
            teacher: teacher_logits.len(),
        });
    }
    let mut tape = Tape::new();
    let s = tape.constant(Tensor::from_parts(vec![labels.len(), classes], student_logits.to_vec()));
    let out = kd_loss(&mut tape, s, teacher_logits, labels, cfg)?;
    Ok(tape.value(out.loss).item())
}

/// Frozen teacher with cached logits per dataset.
#[derive(Debug)]
pub struct TeacherHandle {
    model: Model,
    cache: Mutex<Vec<(u64, Arc<Vec<f64>>)>>,
}

impl TeacherHandle {
    pub fn new(mut model: Model) -> Self {
        model.params_mut().set_requires_grad(false);
        Self {
            model,
            cache: Mutex::new(Vec::new()),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Self {
        Self::new(ckpt.model)
    }

    pub fn load(dir: &Path) -> Result<Self, CheckpointError> {
        Ok(Self::from_checkpoint(Checkpoint::load(dir)?))
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn logits(&self, tokens: &[usize], batch: usize) -> Result<Tensor, ModelError> {
        self.model.logits(tokens, batch)
    }

    /// Logits for every example of `data`, computed once per distinct
    /// dataset.
    pub fn dataset_logits(&self, data: &Dataset) -> Result<Arc<Vec<f64>>, ModelError> {
        let mut h = DefaultHasher::new();
        data.tokens().hash(&mut h);
        data.sequence_length().hash(&mut h);
        let key = h.finish();
        let mut cache = self.cache.lock().expect("teacher cache poisoned");
        if let Some((_, v)) = cache.iter().find(|(k, _)| *k == key) {
            return Ok(Arc::clone(v));
        }
        let logits = Arc::new(self.model.dataset_logits(data)?);
        cache.push((key, Arc::clone(&logits)));
        Ok(logits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionStat {
    pub sample_id: usize,
    pub temperature: f64,
    pub max_prob: f64,
    pub entropy: f64,
}

/// Max probability and entropy of each logit row softened at each
/// temperature, ordered by sample then temperature.
pub fn distribution_stats(
    logits: &[f64],
    classes: usize,
    temperatures: &[f64],
) -> Result<Vec<DistributionStat>, DistillError> {
    if temperatures.is_empty() {
        return Err(DistillError::Empty("temperature list"));
    }
    if logits.is_empty() || classes == 0 {
        return Err(DistillError::Empty("sample list"));
    }
    let mut out = Vec::with_capacity(logits.len() / classes * temperatures.len());
    for (sample_id, row) in logits.chunks(classes).enumerate() {
        for &t in temperatures {
            let p = soften(row, t)?;
            out.push(DistributionStat {
                sample_id,
                temperature: t,
                max_prob: p.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                entropy: entropy(&p),
            });
        }
    }
    Ok(out)
}

/// [`distribution_stats`] over the teacher's logits for `samples`.
pub fn teacher_distribution_stats(
    teacher: &TeacherHandle,
    samples: &Dataset,
    temperatures: &[f64],
) -> Result<Vec<DistributionStat>, DistillError> {
    if samples.is_empty() {
        return Err(DistillError::Empty("sample list"));
    }
    let logits = teacher.dataset_logits(samples)?;
    distribution_stats(&logits, samples.num_classes(), temperatures)
}

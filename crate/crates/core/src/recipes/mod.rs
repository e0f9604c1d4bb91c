//! Declarative training recipes and their compilation into per-step
//! timelines.

mod audit;
mod timeline;

pub use audit::{audit_recipe, AuditDiff, AuditReport};
pub use timeline::{compile_timeline, EventKind, Timeline, TimelineEvent};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::distillation::KdConfig;
use crate::pruning::DistributionPolicy;
use crate::schedules::ScheduleError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RecipeError {
    #[error("{path}: {reason}")]
    Invalid { path: String, reason: String },
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
}

fn invalid(path: &str, reason: impl Into<String>) -> RecipeError {
    RecipeError::Invalid {
        path: path.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Downstream,
    Upstream,
    UpstreamFinetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSpec {
    /// Linear decay from `lr_init` to `lr_final`, restarted every cycle.
    CyclicLinear {
        lr_init: f64,
        lr_final: f64,
        cycle_length_epochs: f64,
    },
    /// One linear decay from `lr_init` to zero over the whole run.
    LinearDecay { lr_init: f64 },
}

impl LrSpec {
    pub fn lr_init(&self) -> f64 {
        match *self {
            Self::CyclicLinear { lr_init, .. } | Self::LinearDecay { lr_init } => lr_init,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparsitySpec {
    pub initial_sparsity: f64,
    pub final_sparsity: f64,
    pub head_freeze_epochs: usize,
    pub tail_freeze_epochs: usize,
    pub prune_frequency_per_epoch: usize,
    #[serde(default)]
    pub distribution: DistributionPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub name: String,
    pub stage: Stage,
    pub total_epochs: usize,
    pub lr: LrSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sparsity: Option<SparsitySpec>,
    pub kd: KdConfig,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    /// Checkpoint directory whose parameters and masks seed a fixed-mask
    /// fine-tuning stage.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_source: Option<String>,
}

/// Bundled recipe files by name.
pub const BUNDLED: [(&str, &str); 4] = [
    ("downstream-10ep", include_str!("../../recipes/downstream-10ep.json")),
    ("downstream-30ep", include_str!("../../recipes/downstream-30ep.json")),
    ("upstream-3ep", include_str!("../../recipes/upstream-3ep.json")),
    (
        "upstream-finetune-8ep",
        include_str!("../../recipes/upstream-finetune-8ep.json"),
    ),
];

/// JSON schema describing the recipe format.
pub const SCHEMA: &str = include_str!("../../recipes/recipe.schema.json");

/// Parses and validates a bundled recipe by name.
pub fn bundled(name: &str) -> Result<Recipe, RecipeError> {
    let name = name.trim_end_matches(".json");
    let (_, text) = BUNDLED
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| invalid("name", format!("no bundled recipe `{name}`")))?;
    parse_recipe(text)
}

/// Parses a JSON recipe. Unknown keys, missing fields and out-of-range
/// values are rejected with the JSON path of the offending field.
pub fn parse_recipe(text: &str) -> Result<Recipe, RecipeError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let recipe: Recipe = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        invalid(if path.is_empty() { "." } else { &path }, e.into_inner().to_string())
    })?;
    recipe.validate()?;
    Ok(recipe)
}

fn check_unit(path: &str, v: f64) -> Result<(), RecipeError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(invalid(path, format!("{v} outside [0, 1]")))
    }
}

fn check_positive(path: &str, v: f64) -> Result<(), RecipeError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(invalid(path, format!("{v} must be positive and finite")))
    }
}

impl Recipe {
    pub fn validate(&self) -> Result<(), RecipeError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if self.total_epochs == 0 {
            return Err(invalid("total_epochs", "must be at least 1"));
        }
        match self.lr {
            LrSpec::CyclicLinear {
                lr_init,
                lr_final,
                cycle_length_epochs,
            } => {
                check_positive("lr.lr_init", lr_init)?;
                check_positive("lr.lr_final", lr_final)?;
                if lr_final >= lr_init {
                    return Err(invalid("lr.lr_final", format!("{lr_final} must be below lr_init {lr_init}")));
                }
                check_positive("lr.cycle_length_epochs", cycle_length_epochs)?;
                let cycles = self.total_epochs as f64 / cycle_length_epochs;
                if (cycles - cycles.round()).abs() > 1e-9 {
                    return Err(invalid(
                        "lr.cycle_length_epochs",
                        format!(
                            "{cycle_length_epochs}-epoch cycles do not divide {} epochs",
                            self.total_epochs
                        ),
                    ));
                }
            }
            LrSpec::LinearDecay { lr_init } => check_positive("lr.lr_init", lr_init)?,
        }
        if let Some(s) = &self.sparsity {
            check_unit("sparsity.initial_sparsity", s.initial_sparsity)?;
            check_unit("sparsity.final_sparsity", s.final_sparsity)?;
            if s.final_sparsity <= s.initial_sparsity || s.final_sparsity >= 1.0 {
                return Err(invalid(
                    "sparsity.final_sparsity",
                    format!(
                        "{} must lie in (initial_sparsity={}, 1)",
                        s.final_sparsity, s.initial_sparsity
                    ),
                ));
            }
            if s.head_freeze_epochs + s.tail_freeze_epochs >= self.total_epochs {
                return Err(invalid(
                    "sparsity.tail_freeze_epochs",
                    "freeze epochs leave no pruning window",
                ));
            }
            if s.prune_frequency_per_epoch == 0 {
                return Err(invalid("sparsity.prune_frequency_per_epoch", "must be at least 1"));
            }
            let k = s.prune_frequency_per_epoch * (self.total_epochs - s.head_freeze_epochs - s.tail_freeze_epochs);
            if k < 2 {
                return Err(invalid(
                    "sparsity.prune_frequency_per_epoch",
                    format!("schedule needs at least 2 prune events, got {k}"),
                ));
            }
        }
        check_unit("kd.hardness", self.kd.hardness)?;
        check_positive("kd.temperature", self.kd.temperature)?;
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight_decay", format!("{} must be >= 0", self.weight_decay)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "must list at least one seed"));
        }
        match self.stage {
            Stage::UpstreamFinetune => {
                if self.sparsity.is_some() {
                    return Err(invalid("sparsity", "fine-tuning stages keep their masks fixed"));
                }
                if self.mask_source.is_none() {
                    return Err(invalid("mask_source", "required for upstream-finetune"));
                }
            }
            _ => {
                if self.mask_source.is_some() {
                    return Err(invalid("mask_source", "only upstream-finetune recipes take a mask source"));
                }
            }
        }
        Ok(())
    }

    /// Pretty JSON accepted by [`parse_recipe`].
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("recipe serializes");
        s.push('\n');
        s
    }

    /// SHA-256 of the compact JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let compact = serde_json::to_string(self).expect("recipe serializes");
        hex::encode(Sha256::digest(compact.as_bytes()))
    }
}

#[cfg(test)]
mod tests;

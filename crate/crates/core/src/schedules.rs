//! Step-indexed sparsity and learning-rate schedules.
//!
//! Sparsity follows a cubic ramp over `K` prune events placed evenly in the
//! window between the head and tail freeze epochs:
//!
//! ```text
//! s(k) = s_f + (s_i - s_f) * (1 - k / (K - 1))^3,   k = 0..K-1
//! ```
//!
//! The k-th event sits at `window_start + floor(k * window_steps / K)`, and
//! the target holds its last value between events. A non-zero `s_i` makes
//! the first event a single large jump.
//!
//! The learning rate decays linearly from `lr_init` to `lr_final` inside
//! every cycle and resets at each cycle start.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule parameter `{field}`: {reason}")]
    InvalidParams { field: &'static str, reason: String },
    #[error("step {step} outside schedule range 0..{total}")]
    StepOutOfRange { step: usize, total: usize },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ScheduleError {
    ScheduleError::InvalidParams {
        field,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityScheduleParams {
    pub initial_sparsity: f64,
    pub final_sparsity: f64,
    pub total_epochs: usize,
    pub head_freeze_epochs: usize,
    pub tail_freeze_epochs: usize,
    pub prune_frequency_per_epoch: usize,
    pub steps_per_epoch: usize,
}

impl SparsityScheduleParams {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let (si, sf) = (self.initial_sparsity, self.final_sparsity);
        if !(0.0..1.0).contains(&si) {
            return Err(invalid("initial_sparsity", format!("{si} not in [0, 1)")));
        }
        if !(sf > si && sf < 1.0) {
            return Err(invalid(
                "final_sparsity",
                format!("{sf} not in (initial_sparsity={si}, 1)"),
            ));
        }
        if self.head_freeze_epochs + self.tail_freeze_epochs >= self.total_epochs {
            return Err(invalid(
                "total_epochs",
                format!(
                    "{} epochs leave no pruning window after {} head and {} tail freeze epochs",
                    self.total_epochs, self.head_freeze_epochs, self.tail_freeze_epochs
                ),
            ));
        }
        if self.prune_frequency_per_epoch == 0 {
            return Err(invalid("prune_frequency_per_epoch", "must be >= 1"));
        }
        if self.event_count() < 2 {
            return Err(invalid(
                "prune_frequency_per_epoch",
                format!("schedule needs at least 2 prune events, got {}", self.event_count()),
            ));
        }
        if self.steps_per_epoch < self.prune_frequency_per_epoch {
            return Err(invalid(
                "steps_per_epoch",
                format!(
                    "{} steps per epoch cannot hold {} prune events per epoch",
                    self.steps_per_epoch, self.prune_frequency_per_epoch
                ),
            ));
        }
        Ok(())
    }

    pub fn window_epochs(&self) -> usize {
        self.total_epochs - self.head_freeze_epochs - self.tail_freeze_epochs
    }

    /// Number of prune events `K`.
    pub fn event_count(&self) -> usize {
        self.prune_frequency_per_epoch * self.window_epochs()
    }

    pub fn total_steps(&self) -> usize {
        self.total_epochs * self.steps_per_epoch
    }

    /// Half-open step range `[start, end)` in which prune events may occur.
    pub fn window(&self) -> (usize, usize) {
        let start = self.head_freeze_epochs * self.steps_per_epoch;
        (start, start + self.window_epochs() * self.steps_per_epoch)
    }
}

/// Validated sparsity schedule with materialized event steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsitySchedule {
    params: SparsityScheduleParams,
    events: Vec<usize>,
}

impl SparsitySchedule {
    pub fn new(params: SparsityScheduleParams) -> Result<Self, ScheduleError> {
        params.validate()?;
        let k_total = params.event_count();
        let (start, end) = params.window();
        let window_steps = end - start;
        let events = (0..k_total)
            .map(|k| start + k * window_steps / k_total)
            .collect();
        Ok(Self { params, events })
    }

    pub fn params(&self) -> &SparsityScheduleParams {
        &self.params
    }

    pub fn event_steps(&self) -> &[usize] {
        &self.events
    }

    /// Cubic target for prune event `k`; the endpoints are exact.
    pub fn event_target(&self, k: usize) -> f64 {
        let last = self.events.len() - 1;
        let (si, sf) = (self.params.initial_sparsity, self.params.final_sparsity);
        if k == 0 {
            si
        } else if k >= last {
            sf
        } else {
            let remaining = 1.0 - k as f64 / last as f64;
            sf + (si - sf) * remaining * remaining * remaining
        }
    }

    /// Index of the prune event scheduled at exactly `step`, if any.
    pub fn event_at(&self, step: usize) -> Option<usize> {
        self.events.binary_search(&step).ok()
    }

    pub fn sparsity_at(&self, step: usize) -> Result<f64, ScheduleError> {
        let total = self.params.total_steps();
        if step >= total {
            return Err(ScheduleError::StepOutOfRange { step, total });
        }
        let passed = self.events.partition_point(|&e| e <= step);
        Ok(match passed {
            0 => 0.0,
            n => self.event_target(n - 1),
        })
    }
}

pub fn sparsity_at(params: &SparsityScheduleParams, step: usize) -> Result<f64, ScheduleError> {
    SparsitySchedule::new(*params)?.sparsity_at(step)
}

pub fn prune_event_steps(params: &SparsityScheduleParams) -> Result<Vec<usize>, ScheduleError> {
    Ok(SparsitySchedule::new(*params)?.events)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrScheduleParams {
    pub lr_init: f64,
    pub lr_final: f64,
    pub cycle_length_epochs: f64,
    pub total_epochs: usize,
    pub steps_per_epoch: usize,
}

impl LrScheduleParams {
    /// Steps per cycle; errors unless the cycle covers a whole number of
    /// steps and the run is a whole number of cycles.
    pub fn cycle_steps(&self) -> Result<usize, ScheduleError> {
        if !(self.lr_init > self.lr_final && self.lr_final > 0.0) {
            return Err(invalid(
                "lr_init",
                format!("need lr_init > lr_final > 0, got {} and {}", self.lr_init, self.lr_final),
            ));
        }
        if !(self.cycle_length_epochs > 0.0) {
            return Err(invalid("cycle_length_epochs", "must be positive"));
        }
        if self.total_epochs == 0 || self.steps_per_epoch == 0 {
            return Err(invalid("total_epochs", "run must contain at least one step"));
        }
        let exact = self.cycle_length_epochs * self.steps_per_epoch as f64;
        let rounded = exact.round();
        if (exact - rounded).abs() > 1e-9 || rounded < 2.0 {
            return Err(invalid(
                "cycle_length_epochs",
                format!(
                    "{} epochs x {} steps per epoch is not a whole number of steps >= 2",
                    self.cycle_length_epochs, self.steps_per_epoch
                ),
            ));
        }
        let cycle = rounded as usize;
        let total = self.total_epochs * self.steps_per_epoch;
        if !total.is_multiple_of(cycle) {
            return Err(invalid(
                "cycle_length_epochs",
                format!(
                    "{} total epochs is not a multiple of the {}-epoch cycle",
                    self.total_epochs, self.cycle_length_epochs
                ),
            ));
        }
        Ok(cycle)
    }
}

/// Sawtooth of linear decays, one per cycle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CyclicLrSchedule {
    params: LrScheduleParams,
    cycle_steps: usize,
}

impl CyclicLrSchedule {
    pub fn new(params: LrScheduleParams) -> Result<Self, ScheduleError> {
        let cycle_steps = params.cycle_steps()?;
        Ok(Self {
            params,
            cycle_steps,
        })
    }

    pub fn cycle_steps(&self) -> usize {
        self.cycle_steps
    }

    pub fn cycle_count(&self) -> usize {
        self.total_steps() / self.cycle_steps
    }

    pub fn total_steps(&self) -> usize {
        self.params.total_epochs * self.params.steps_per_epoch
    }

    pub fn lr_at(&self, step: usize) -> Result<f64, ScheduleError> {
        let total = self.total_steps();
        if step >= total {
            return Err(ScheduleError::StepOutOfRange { step, total });
        }
        let pos = step % self.cycle_steps;
        let frac = pos as f64 / (self.cycle_steps - 1) as f64;
        Ok(self.params.lr_init * (1.0 - frac) + self.params.lr_final * frac)
    }
}

pub fn lr_at(params: &LrScheduleParams, step: usize) -> Result<f64, ScheduleError> {
    CyclicLrSchedule::new(*params)?.lr_at(step)
}

/// Single linear decay from `lr_init` at step 0 to zero at `total_steps`.
pub fn linear_decay_lr(lr_init: f64, total_steps: usize, step: usize) -> Result<f64, ScheduleError> {
    if !(lr_init > 0.0) {
        return Err(invalid("lr_init", "must be positive"));
    }
    if total_steps == 0 {
        return Err(invalid("total_steps", "must be >= 1"));
    }
    if step > total_steps {
        return Err(ScheduleError::StepOutOfRange {
            step,
            total: total_steps + 1,
        });
    }
    Ok(lr_init * (1.0 - step as f64 / total_steps as f64))
}

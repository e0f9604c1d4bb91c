use serde::{Deserialize, Serialize};

use super::{LrSpec, Recipe, RecipeError};
use crate::schedules::{
    linear_decay_lr, CyclicLrSchedule, LrScheduleParams, SparsitySchedule, SparsityScheduleParams,
};

/// What happens at a timeline step. Variants are listed in execution order
/// for events sharing a step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventKind {
    /// First step at which masks may change.
    PruningWindowStart,
    /// Masks are extended to `target` before the step's forward pass.
    Prune { index: usize, target: f64 },
    /// First step of the tail phase in which masks stay fixed.
    MaskFreezeStart,
    /// Validation after the step's optimizer update.
    Evaluate,
}

impl EventKind {
    fn rank(&self) -> u8 {
        match self {
            Self::PruningWindowStart => 0,
            Self::Prune { .. } => 1,
            Self::MaskFreezeStart => 2,
            Self::Evaluate => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimelineEvent {
    pub step: usize,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// Every step's learning rate and sparsity target, plus ordered events.
#[derive(Debug, Clone, PartialEq)]
pub struct Timeline {
    steps_per_epoch: usize,
    lr: Vec<f64>,
    target: Vec<f64>,
    events: Vec<TimelineEvent>,
    cycles: Option<usize>,
}

impl Timeline {
    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.lr.len()
    }

    pub fn lr(&self) -> &[f64] {
        &self.lr
    }

    /// Target sparsity in force during each step.
    pub fn targets(&self) -> &[f64] {
        &self.target
    }

    pub fn events(&self) -> &[TimelineEvent] {
        &self.events
    }

    /// Number of learning-rate cycles; `None` for a single linear decay.
    pub fn cycle_count(&self) -> Option<usize> {
        self.cycles
    }

    pub fn prune_events(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.events.iter().filter_map(|e| match e.kind {
            EventKind::Prune { index, target } => Some((e.step, index, target)),
            _ => None,
        })
    }

    pub fn prune_target_at(&self, step: usize) -> Option<f64> {
        self.prune_events().find(|(s, _, _)| *s == step).map(|(_, _, t)| t)
    }

    pub fn evaluation_steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Evaluate)
            .map(|e| e.step)
    }

    /// `step,lr,target_sparsity` rows with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,target_sparsity\n");
        for (step, (lr, t)) in self.lr.iter().zip(&self.target).enumerate() {
            out.push_str(&format!("{step},{lr:.16e},{t:.16e}\n"));
        }
        out
    }
}

/// Materializes a recipe for a given number of optimizer steps per epoch.
///
/// Evaluation runs at every epoch end and right after the first and last
/// prune events.
pub fn compile_timeline(recipe: &Recipe, steps_per_epoch: usize) -> Result<Timeline, RecipeError> {
    recipe.validate()?;
    if steps_per_epoch == 0 {
        return Err(super::invalid("steps_per_epoch", "must be at least 1"));
    }
    let total = recipe.total_epochs * steps_per_epoch;
    let (lr, cycles) = match recipe.lr {
        LrSpec::CyclicLinear {
            lr_init,
            lr_final,
            cycle_length_epochs,
        } => {
            let sched = CyclicLrSchedule::new(LrScheduleParams {
                lr_init,
                lr_final,
                cycle_length_epochs,
                total_epochs: recipe.total_epochs,
                steps_per_epoch,
            })?;
            let lr = (0..total).map(|s| sched.lr_at(s)).collect::<Result<_, _>>()?;
            (lr, Some(sched.cycle_count()))
        }
        LrSpec::LinearDecay { lr_init } => {
            let lr = (0..total)
                .map(|s| linear_decay_lr(lr_init, total, s))
                .collect::<Result<_, _>>()?;
            (lr, None)
        }
    };

    let mut events = Vec::new();
    let mut target = vec![0.0; total];
    if let Some(s) = &recipe.sparsity {
        let sched = SparsitySchedule::new(SparsityScheduleParams {
            initial_sparsity: s.initial_sparsity,
            final_sparsity: s.final_sparsity,
            total_epochs: recipe.total_epochs,
            head_freeze_epochs: s.head_freeze_epochs,
            tail_freeze_epochs: s.tail_freeze_epochs,
            prune_frequency_per_epoch: s.prune_frequency_per_epoch,
            steps_per_epoch,
        })?;
        for (step, t) in target.iter_mut().enumerate() {
            *t = sched.sparsity_at(step)?;
        }
        let (start, end) = sched.params().window();
        events.push(TimelineEvent {
            step: start,
            kind: EventKind::PruningWindowStart,
        });
        for (index, &step) in sched.event_steps().iter().enumerate() {
            events.push(TimelineEvent {
                step,
                kind: EventKind::Prune {
                    index,
                    target: sched.event_target(index),
                },
            });
        }
        if end < total {
            events.push(TimelineEvent {
                step: end,
                kind: EventKind::MaskFreezeStart,
            });
        }
        let steps = sched.event_steps();
        for step in [steps[0], steps[steps.len() - 1]] {
            events.push(TimelineEvent {
                step,
                kind: EventKind::Evaluate,
            });
        }
    }
    for epoch in 1..=recipe.total_epochs {
        events.push(TimelineEvent {
            step: epoch * steps_per_epoch - 1,
            kind: EventKind::Evaluate,
        });
    }
    events.sort_by_key(|e| (e.step, e.kind.rank()));
    events.dedup();
    Ok(Timeline {
        steps_per_epoch,
        lr,
        target,
        events,
        cycles,
    })
}

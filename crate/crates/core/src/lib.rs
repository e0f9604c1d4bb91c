//! Gradual magnitude pruning with distillation for small classifiers.

pub mod distillation;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod pruning;
pub mod recipes;
pub mod schedules;

use serde::{Deserialize, Serialize};

use crate::distillation::KdConfig;

pub const METRICS_HEADER: &str =
    "step,epoch,lr,target_sparsity,achieved_sparsity,train_loss,ce_term,kl_term,val_accuracy";

/// One evaluation point. Loss columns average the steps since the previous
/// evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    /// Optimizer steps completed.
    pub step: usize,
    pub epoch: f64,
    pub lr: f64,
    pub target_sparsity: f64,
    pub achieved_sparsity: f64,
    pub train_loss: f64,
    pub ce_term: f64,
    pub kl_term: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub recipe: String,
    pub recipe_hash: String,
    pub seed: u64,
    pub steps: usize,
    pub steps_per_epoch: usize,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub final_sparsity: f64,
    pub target_sparsity: f64,
    pub kd: KdConfig,
    pub prunable_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<MetricRecord>,
    pub summary: RunSummary,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.step,
                r.epoch,
                r.lr,
                r.target_sparsity,
                r.achieved_sparsity,
                r.train_loss,
                r.ce_term,
                r.kl_term,
                r.val_accuracy
            ));
        }
        out
    }
}

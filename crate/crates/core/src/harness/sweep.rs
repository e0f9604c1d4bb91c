use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{io_err, run, run_to_dir, write_file, HarnessError, RunSetup, StudentInit};
use crate::distillation::TeacherHandle;
use crate::models::SyntheticTask;
use crate::recipes::{parse_recipe, Recipe, RecipeError};

/// Returns a copy of `recipe` with the dotted `path` replaced by `value`,
/// validated like a freshly parsed recipe. Intermediate objects are created
/// when absent.
pub fn set_field(recipe: &Recipe, path: &str, value: Value) -> Result<Recipe, RecipeError> {
    let mut doc = serde_json::to_value(recipe).expect("recipe serializes");
    let mut node = &mut doc;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| RecipeError::Invalid {
            path: parts[..i].join("."),
            reason: "not an object".into(),
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            break;
        }
        node = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    parse_recipe(&doc.to_string())
}

/// One recipe field varied over values, each run with every seed.
#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub base: Recipe,
    pub field: String,
    pub values: Vec<Value>,
    pub seeds: Vec<u64>,
    pub task: SyntheticTask,
    pub student: StudentInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: Value,
    /// Final validation accuracy per successful seed, in seed order.
    pub accuracies: Vec<f64>,
    /// Seeds whose run failed, with the error message.
    pub failed: Vec<(u64, String)>,
}

impl SweepRow {
    pub fn mean(&self) -> f64 {
        self.accuracies.iter().sum::<f64>() / self.accuracies.len() as f64
    }

    /// Sample standard deviation (n − 1 denominator); zero for one run.
    pub fn std(&self) -> f64 {
        let n = self.accuracies.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean();
        let ss: f64 = self.accuracies.iter().map(|a| (a - m) * (a - m)).sum();
        (ss / (n - 1) as f64).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub field: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    /// `value,mean_accuracy,std_accuracy,seeds,failed`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("value,mean_accuracy,std_accuracy,seeds,failed\n");
        for r in &self.rows {
            let value = match &r.value {
                Value::String(s) => s.clone(),
                v => v.to_string(),
            };
            let (mean, std) = if r.accuracies.is_empty() {
                (f64::NAN, f64::NAN)
            } else {
                (r.mean(), r.std())
            };
            out.push_str(&format!(
                "{value},{mean:.16e},{std:.16e},{},{}\n",
                r.accuracies.len(),
                r.failed.len()
            ));
        }
        out
    }
}

fn label(value: &Value) -> String {
    let raw = match value {
        Value::String(s) => s.clone(),
        v => v.to_string(),
    };
    raw.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Runs every (value, seed) pair in parallel. A failing run is recorded in
/// its row and does not stop the others. With `out`, each run writes into
/// `out/<field>=<value>/seed-<seed>/` and the table goes to
/// `out/table.csv`.
pub fn sweep(
    spec: &SweepSpec,
    teacher: Option<&TeacherHandle>,
    out: Option<&Path>,
) -> Result<SweepTable, HarnessError> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        return Err(HarnessError::Invalid("sweep needs at least one value and one seed".into()));
    }
    let recipes = spec
        .values
        .iter()
        .map(|v| set_field(&spec.base, &spec.field, v.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let jobs: Vec<(usize, u64)> = (0..recipes.len())
        .flat_map(|i| spec.seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<(usize, u64, Result<f64, HarnessError>)> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let setup = RunSetup {
                recipe: recipes[i].clone(),
                task: spec.task.clone(),
                student: spec.student.clone(),
                seed,
            };
            let result = match out {
                Some(dir) => {
                    let sub = dir
                        .join(format!("{}={}", spec.field, label(&spec.values[i])))
                        .join(format!("seed-{seed}"));
                    run_to_dir(&setup, teacher, &sub)
                }
                None => run(&setup, teacher),
            };
            (i, seed, result.map(|o| o.metrics.summary.final_accuracy))
        })
        .collect();

    let mut rows: Vec<SweepRow> = spec
        .values
        .iter()
        .map(|v| SweepRow {
            value: v.clone(),
            accuracies: Vec::new(),
            failed: Vec::new(),
        })
        .collect();
    for (i, seed, result) in results {
        match result {
            Ok(acc) => rows[i].accuracies.push(acc),
            Err(e) => rows[i].failed.push((seed, e.to_string())),
        }
    }
    let table = SweepTable {
        field: spec.field.clone(),
        rows,
    };
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        write_file(&dir.join("table.csv"), table.to_csv())?;
    }
    Ok(table)
}

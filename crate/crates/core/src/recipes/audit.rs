use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::Recipe;

/// One field whose value is not among the reference values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditDiff {
    pub path: String,
    pub expected: String,
    pub actual: String,
}

impl std::fmt::Display for AuditDiff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: expected {}, found {}", self.path, self.expected, self.actual)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub recipe: String,
    pub diffs: Vec<AuditDiff>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.diffs.is_empty()
    }
}

/// Fields left out of the comparison: identifiers, run bookkeeping, and
/// the KL scaling switch, which the reference does not pin down.
const UNCHECKED: [&str; 4] = ["name", "seeds", "mask_source", "kd.kl_scaling"];

const FINAL_SPARSITIES: [f64; 2] = [0.90, 0.97];

/// Reference constants per bundled recipe. Each path maps to the accepted
/// values.
fn reference(name: &str) -> Option<BTreeMap<&'static str, Vec<Value>>> {
    let kd = [
        ("kd.hardness", vec![json!(1.0)]),
        ("kd.temperature", vec![json!(5.5)]),
    ];
    let finals: Vec<Value> = FINAL_SPARSITIES.iter().map(|v| json!(v)).collect();
    let downstream = |epochs: u64| {
        let mut m: BTreeMap<&'static str, Vec<Value>> = BTreeMap::from([
            ("stage", vec![json!("downstream")]),
            ("total_epochs", vec![json!(epochs)]),
            ("lr.kind", vec![json!("cyclic_linear")]),
            ("lr.lr_init", vec![json!(1e-4)]),
            ("lr.lr_final", vec![json!(1e-6)]),
            ("lr.cycle_length_epochs", vec![json!(2.0)]),
            ("sparsity.initial_sparsity", vec![json!(0.7)]),
            ("sparsity.final_sparsity", finals.clone()),
            ("sparsity.head_freeze_epochs", vec![json!(2)]),
            ("sparsity.tail_freeze_epochs", vec![json!(2)]),
            ("sparsity.prune_frequency_per_epoch", vec![json!(10)]),
            ("sparsity.distribution", vec![json!("uniform")]),
            ("weight_decay", vec![json!(0.0)]),
            ("batch_size", vec![json!(16), json!(32)]),
        ]);
        m.extend(kd.clone());
        m
    };
    let table = match name {
        "downstream-10ep" => downstream(10),
        "downstream-30ep" => downstream(30),
        "upstream-3ep" => {
            let mut m = BTreeMap::from([
                ("stage", vec![json!("upstream")]),
                ("total_epochs", vec![json!(3)]),
                ("lr.kind", vec![json!("cyclic_linear")]),
                ("lr.lr_init", vec![json!(5e-4)]),
                ("lr.lr_final", vec![json!(5e-6)]),
                ("lr.cycle_length_epochs", vec![json!(0.5)]),
                ("sparsity.initial_sparsity", vec![json!(0.7)]),
                ("sparsity.final_sparsity", finals.clone()),
                ("sparsity.head_freeze_epochs", vec![json!(0)]),
                ("sparsity.tail_freeze_epochs", vec![json!(1)]),
                ("sparsity.prune_frequency_per_epoch", vec![json!(100)]),
                ("sparsity.distribution", vec![json!("uniform")]),
                ("weight_decay", vec![json!(0.01)]),
                ("batch_size", vec![json!(256)]),
            ]);
            m.extend(kd.clone());
            m
        }
        "upstream-finetune-8ep" => {
            let mut m = BTreeMap::from([
                ("stage", vec![json!("upstream-finetune")]),
                ("total_epochs", vec![json!(8)]),
                ("lr.kind", vec![json!("linear_decay")]),
                ("lr.lr_init", vec![json!(1.5e-5)]),
                ("weight_decay", vec![json!(0.0)]),
                ("batch_size", vec![json!(16), json!(32)]),
            ]);
            m.extend(kd);
            m
        }
        _ => return None,
    };
    Some(table)
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let path = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&path, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

fn same(a: &Value, b: &Value) -> bool {
    match (a.as_f64(), b.as_f64()) {
        (Some(x), Some(y)) => (x - y).abs() <= 1e-12 * x.abs().max(y.abs()).max(1.0),
        _ => a == b,
    }
}

fn show(values: &[Value]) -> String {
    let parts: Vec<String> = values.iter().map(Value::to_string).collect();
    if parts.len() == 1 {
        parts[0].clone()
    } else {
        format!("one of {}", parts.join(", "))
    }
}

/// Compares every field of a bundled recipe with the reference constants.
/// Fields missing from either side are reported too.
pub fn audit_recipe(recipe: &Recipe) -> AuditReport {
    let mut diffs = Vec::new();
    let Some(table) = reference(&recipe.name) else {
        diffs.push(AuditDiff {
            path: "name".into(),
            expected: "a bundled recipe name".into(),
            actual: format!("\"{}\"", recipe.name),
        });
        return AuditReport {
            recipe: recipe.name.clone(),
            diffs,
        };
    };
    let mut fields = BTreeMap::new();
    flatten("", &serde_json::to_value(recipe).expect("recipe serializes"), &mut fields);
    fields.retain(|k, _| !UNCHECKED.contains(&k.as_str()));

    for (path, allowed) in &table {
        match fields.get(*path) {
            Some(v) if allowed.iter().any(|a| same(a, v)) => {}
            Some(v) => diffs.push(AuditDiff {
                path: path.to_string(),
                expected: show(allowed),
                actual: v.to_string(),
            }),
            None => diffs.push(AuditDiff {
                path: path.to_string(),
                expected: show(allowed),
                actual: "missing".into(),
            }),
        }
    }
    for (path, v) in &fields {
        if !table.contains_key(path.as_str()) {
            diffs.push(AuditDiff {
                path: path.clone(),
                expected: "absent".into(),
                actual: v.to_string(),
            });
        }
    }
    if recipe.name == "upstream-finetune-8ep" && recipe.mask_source.is_none() {
        diffs.push(AuditDiff {
            path: "mask_source".into(),
            expected: "a fixed-mask checkpoint".into(),
            actual: "missing".into(),
        });
    }
    diffs.sort_by(|a, b| a.path.cmp(&b.path));
    AuditReport {
        recipe: recipe.name.clone(),
        diffs,
    }
}

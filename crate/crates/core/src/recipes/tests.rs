use super::*;
use crate::schedules::{lr_at, sparsity_at, LrScheduleParams, SparsityScheduleParams};

#[test]
fn bundled_downstream_constants() {
    let r = bundled("downstream-10ep").unwrap();
    assert_eq!(r.stage, Stage::Downstream);
    assert_eq!(
        r.lr,
        LrSpec::CyclicLinear {
            lr_init: 1e-4,
            lr_final: 1e-6,
            cycle_length_epochs: 2.0
        }
    );
    let s = r.sparsity.unwrap();
    assert_eq!(s.initial_sparsity, 0.70);
    assert_eq!(s.prune_frequency_per_epoch, 10);
    assert_eq!((r.kd.hardness, r.kd.temperature), (1.0, 5.5));
    assert_eq!(r.weight_decay, 0.0);
}

#[test]
fn bundled_upstream_constants() {
    let r = bundled("upstream-3ep").unwrap();
    assert_eq!(r.lr.lr_init(), 5e-4);
    assert!(matches!(r.lr, LrSpec::CyclicLinear { cycle_length_epochs, .. } if cycle_length_epochs == 0.5));
    assert_eq!(r.sparsity.unwrap().prune_frequency_per_epoch, 100);
    assert_eq!(r.total_epochs, 3);
    assert_eq!(r.weight_decay, 0.01);
    assert_eq!(r.batch_size, 256);
}

#[test]
fn finetune_recipe_uses_fixed_masks_and_linear_decay() {
    let r = bundled("upstream-finetune-8ep").unwrap();
    assert_eq!(r.lr, LrSpec::LinearDecay { lr_init: 1.5e-5 });
    assert_eq!(r.total_epochs, 8);
    assert!(r.sparsity.is_none());
    assert!(r.mask_source.is_some());
}

fn edited(path: &[&str], value: serde_json::Value) -> String {
    let mut v: serde_json::Value = serde_json::from_str(BUNDLED[0].1).unwrap();
    let mut cur = &mut v;
    for p in &path[..path.len() - 1] {
        cur = cur.get_mut(*p).unwrap();
    }
    cur[path[path.len() - 1]] = value;
    v.to_string()
}

#[test]
fn out_of_range_hardness_rejected_with_path() {
    let err = parse_recipe(&edited(&["kd", "hardness"], 1.5.into())).unwrap_err();
    assert!(err.to_string().starts_with("kd.hardness"), "{err}");
}

#[test]
fn unknown_and_missing_keys_rejected_with_path() {
    let err = parse_recipe(&edited(&["kd", "hardnes"], 1.0.into())).unwrap_err();
    assert!(err.to_string().contains("kd"), "{err}");
    assert!(err.to_string().contains("hardnes"), "{err}");
    let mut v: serde_json::Value = serde_json::from_str(BUNDLED[0].1).unwrap();
    v["sparsity"].as_object_mut().unwrap().remove("final_sparsity");
    let err = parse_recipe(&v.to_string()).unwrap_err();
    assert!(err.to_string().contains("sparsity"), "{err}");
    assert!(err.to_string().contains("final_sparsity"), "{err}");
}

#[test]
fn cycle_not_dividing_epochs_rejected() {
    let err = parse_recipe(&edited(&["lr", "cycle_length_epochs"], 3.0.into())).unwrap_err();
    assert!(err.to_string().starts_with("lr.cycle_length_epochs"), "{err}");
}

#[test]
fn finetune_stage_rules() {
    let mut v: serde_json::Value = serde_json::from_str(BUNDLED[3].1).unwrap();
    v.as_object_mut().unwrap().remove("mask_source");
    assert!(parse_recipe(&v.to_string()).is_err());
    let err = parse_recipe(&edited(&["mask_source"], "x".into())).unwrap_err();
    assert!(err.to_string().starts_with("mask_source"), "{err}");
}

#[test]
fn parse_serialize_parse_is_fixed_point() {
    for (_, text) in BUNDLED {
        let a = parse_recipe(text).unwrap();
        let b = parse_recipe(&a.to_json()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(a.hash(), b.hash());
    }
}

#[test]
fn hash_changes_with_content() {
    let a = bundled("downstream-10ep").unwrap();
    let b = parse_recipe(&edited(&["kd", "temperature"], 2.0.into())).unwrap();
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn schema_lists_every_top_level_field() {
    let schema: serde_json::Value = serde_json::from_str(SCHEMA).unwrap();
    let props = schema["properties"].as_object().unwrap();
    for (_, text) in BUNDLED {
        let v: serde_json::Value = serde_json::from_str(text).unwrap();
        for key in v.as_object().unwrap().keys() {
            assert!(props.contains_key(key), "{key}");
        }
    }
}

#[test]
fn event_and_cycle_counts() {
    let t = compile_timeline(&bundled("downstream-10ep").unwrap(), 100).unwrap();
    assert_eq!(t.prune_events().count(), 60);
    assert_eq!(t.cycle_count(), Some(5));
    let t = compile_timeline(&bundled("downstream-30ep").unwrap(), 100).unwrap();
    assert_eq!(t.cycle_count(), Some(15));
    let t = compile_timeline(&bundled("upstream-3ep").unwrap(), 200).unwrap();
    assert_eq!(t.prune_events().count(), 200);
    assert!(t.prune_events().all(|(s, _, _)| s < 2 * 200));
}

#[test]
fn timeline_matches_schedules_pointwise() {
    let r = bundled("downstream-10ep").unwrap();
    let spe = 37;
    let t = compile_timeline(&r, spe).unwrap();
    let s = r.sparsity.unwrap();
    let sp = SparsityScheduleParams {
        initial_sparsity: s.initial_sparsity,
        final_sparsity: s.final_sparsity,
        total_epochs: 10,
        head_freeze_epochs: 2,
        tail_freeze_epochs: 2,
        prune_frequency_per_epoch: 10,
        steps_per_epoch: spe,
    };
    let lp = LrScheduleParams {
        lr_init: 1e-4,
        lr_final: 1e-6,
        cycle_length_epochs: 2.0,
        total_epochs: 10,
        steps_per_epoch: spe,
    };
    for step in 0..t.total_steps() {
        assert_eq!(t.targets()[step], sparsity_at(&sp, step).unwrap());
        assert_eq!(t.lr()[step], lr_at(&lp, step).unwrap());
    }
}

#[test]
fn timeline_boundary_facts() {
    for (name, _) in BUNDLED {
        let r = bundled(name).unwrap();
        let spe = if r.stage == Stage::Upstream { 100 } else { 20 };
        let t = compile_timeline(&r, spe).unwrap();
        assert!(t.events().windows(2).all(|w| w[0].step <= w[1].step));
        let Some(s) = r.sparsity else {
            assert_eq!(t.prune_events().count(), 0);
            continue;
        };
        let head = s.head_freeze_epochs * spe;
        let tail = (r.total_epochs - s.tail_freeze_epochs) * spe;
        assert!(t.prune_events().all(|(st, _, _)| st >= head && st < tail));
        let last = t.prune_events().last().unwrap();
        assert_eq!(last.2, s.final_sparsity);
        assert_eq!(*t.targets().last().unwrap(), s.final_sparsity);
        assert_eq!(t.prune_events().next().unwrap().2, s.initial_sparsity);
    }
}

#[test]
fn evaluation_cadence() {
    let t = compile_timeline(&bundled("downstream-10ep").unwrap(), 20).unwrap();
    let evals: Vec<usize> = t.evaluation_steps().collect();
    assert_eq!(evals.len(), 12);
    assert!(evals.contains(&40));
    assert!(evals.contains(&19));
    assert!(evals.contains(&199));
}

#[test]
fn emitted_csv_has_five_peaks() {
    let t = compile_timeline(&bundled("downstream-10ep").unwrap(), 20).unwrap();
    let csv = t.to_csv();
    let rows: Vec<Vec<f64>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.iter().filter(|r| r[1] == 1e-4).count(), 5);
    let first = rows.iter().find(|r| r[2] != 0.0).unwrap();
    assert_eq!(first[2], 0.70);
    assert_eq!(rows.last().unwrap()[2], 0.97);
}

#[test]
fn audit_of_bundled_recipes_is_clean() {
    for (name, _) in BUNDLED {
        let report = audit_recipe(&bundled(name).unwrap());
        assert!(report.is_clean(), "{name}: {:?}", report.diffs);
    }
}

#[test]
fn audit_reports_single_edited_field() {
    let r = parse_recipe(&edited(&["kd", "temperature"], 2.0.into())).unwrap();
    let report = audit_recipe(&r);
    assert_eq!(report.diffs.len(), 1);
    assert_eq!(report.diffs[0].path, "kd.temperature");
    assert_eq!(report.diffs[0].to_string(), "kd.temperature: expected 5.5, found 2.0");
}

#[test]
fn audit_accepts_both_final_sparsities_and_flags_others() {
    let r = parse_recipe(&edited(&["sparsity", "final_sparsity"], 0.9.into())).unwrap();
    assert!(audit_recipe(&r).is_clean());
    let r = parse_recipe(&edited(&["sparsity", "final_sparsity"], 0.8.into())).unwrap();
    assert_eq!(audit_recipe(&r).diffs[0].path, "sparsity.final_sparsity");
    let r = parse_recipe(&edited(&["name"], "custom".into())).unwrap();
    assert_eq!(audit_recipe(&r).diffs[0].path, "name");
}

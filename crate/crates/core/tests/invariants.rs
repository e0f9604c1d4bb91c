use proptest::prelude::*;

use gradprune_core::distillation::{kd_loss_value, KdConfig};
use gradprune_core::harness::{run, RunSetup, StudentInit};
use gradprune_core::models::{MlpConfig, ModelConfig, SyntheticTask};
use gradprune_core::pruning::{sparsity_report, PrunableSet};
use gradprune_core::recipes::{bundled, compile_timeline, parse_recipe, LrSpec, Recipe, SparsitySpec};

fn recipe_strategy() -> impl Strategy<Value = (Recipe, usize)> {
    (
        3usize..12,
        0usize..3,
        0usize..3,
        1usize..5,
        0.0f64..0.8,
        0.05f64..0.19,
        prop::bool::ANY,
        2usize..5,
    )
        .prop_filter("window must be non-empty", |(e, h, t, ..)| h + t < *e)
        .prop_map(|(epochs, head, tail, freq, si, gap, cyclic, mult)| {
            let mut r = bundled("downstream-10ep").unwrap();
            r.total_epochs = epochs;
            r.lr = if cyclic {
                LrSpec::CyclicLinear {
                    lr_init: 1e-3,
                    lr_final: 1e-5,
                    cycle_length_epochs: 1.0,
                }
            } else {
                LrSpec::LinearDecay { lr_init: 1e-3 }
            };
            r.sparsity = Some(SparsitySpec {
                initial_sparsity: si,
                final_sparsity: si + gap,
                head_freeze_epochs: head,
                tail_freeze_epochs: tail,
                prune_frequency_per_epoch: freq,
                ..r.sparsity.unwrap()
            });
            (r, freq * mult)
        })
        .prop_filter("at least two events", |(r, _)| {
            let s = r.sparsity.unwrap();
            s.prune_frequency_per_epoch * (r.total_epochs - s.head_freeze_epochs - s.tail_freeze_epochs) >= 2
        })
}

proptest! {
    #[test]
    fn timeline_targets_rise_and_rates_stay_in_range((recipe, spe) in recipe_strategy()) {
        let tl = compile_timeline(&recipe, spe).unwrap();
        let s = recipe.sparsity.unwrap();
        prop_assert!(tl.targets().windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*tl.targets().last().unwrap(), s.final_sparsity);
        let floor = match recipe.lr { LrSpec::CyclicLinear { lr_final, .. } => lr_final, _ => 0.0 };
        prop_assert!(tl.lr().iter().all(|&lr| lr >= floor - 1e-18 && lr <= 1e-3));
        let k = s.prune_frequency_per_epoch * (recipe.total_epochs - s.head_freeze_epochs - s.tail_freeze_epochs);
        prop_assert_eq!(tl.prune_events().count(), k);
    }

    #[test]
    fn recipe_json_round_trip_is_a_fixed_point((recipe, _) in recipe_strategy()) {
        let text = recipe.to_json();
        let back = parse_recipe(&text).unwrap();
        prop_assert_eq!(&back, &recipe);
        prop_assert_eq!(back.to_json(), text);
        prop_assert_eq!(back.hash(), recipe.hash());
    }

    #[test]
    fn distillation_loss_is_non_negative(
        s in prop::collection::vec(-6.0f64..6.0, 6),
        t in prop::collection::vec(-6.0f64..6.0, 6),
        h in 0.0f64..=1.0,
        temp in 0.5f64..10.0,
    ) {
        let cfg = KdConfig { hardness: h, temperature: temp, kl_scaling: true };
        let v = kd_loss_value(&s, &t, &[0, 2], 3, &cfg).unwrap();
        prop_assert!(v.is_finite() && v >= -1e-12);
    }
}

#[test]
fn achieved_sparsity_tracks_schedule_at_every_evaluation() {
    let mut recipe = bundled("downstream-10ep").unwrap();
    recipe.kd = KdConfig::none();
    recipe.lr = LrSpec::CyclicLinear {
        lr_init: 1e-2,
        lr_final: 1e-4,
        cycle_length_epochs: 2.0,
    };
    let model = ModelConfig::from(MlpConfig {
        vocab_size: 64,
        sequence_length: 16,
        embed_dim: 4,
        hidden_dims: vec![24, 24],
        num_classes: 4,
        seed: 0,
    });
    let setup = RunSetup {
        recipe,
        task: SyntheticTask {
            train_size: 160,
            validation_size: 32,
            decoys: 2,
            ..SyntheticTask::default()
        },
        student: StudentInit::Scratch(model),
        seed: 2,
    };
    let out = run(&setup, None).unwrap();
    let masks = out.checkpoint.masks.as_ref().unwrap();
    let set = PrunableSet::from_params(out.checkpoint.model.params());
    let smallest = set.shapes().iter().map(|s| s.iter().product::<usize>()).min().unwrap();
    let bound = 0.5 / smallest as f64 + 1e-12;
    for r in &out.metrics.records {
        assert!(
            (r.achieved_sparsity - r.target_sparsity).abs() <= bound,
            "step {}: {} vs {}",
            r.step,
            r.achieved_sparsity,
            r.target_sparsity
        );
    }
    let report = sparsity_report(masks, &set).unwrap();
    assert_eq!(report.pruned, masks.pruned());
    assert!((report.aggregate - 0.97).abs() <= bound);
    for (name, t) in out.checkpoint.model.params().iter() {
        if let Some(i) = masks.names().iter().position(|n| n == name) {
            let zeros = t.data().iter().zip(masks.keep(i)).filter(|(v, k)| !**k && v.to_bits() == 0).count();
            assert_eq!(zeros, masks.keep(i).iter().filter(|k| !**k).count());
        }
    }
}

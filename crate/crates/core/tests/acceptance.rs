//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails. `ACCEPTANCE_ONLY=C1,C4` restricts the run.

use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use gradprune_core::distillation::{
    cross_entropy, entropy, kd_loss, kd_loss_value, soften, KdConfig, TeacherHandle,
};
use gradprune_core::harness::{default_model_for, run, run_to_dir, set_field, RunSetup, StudentInit, SweepRow};
use gradprune_core::models::{train_teacher, Checkpoint, SyntheticTask, TeacherTraining};
use gradprune_core::numerics::{ParamSet, Tape, Tensor};
use gradprune_core::pruning::{apply_masks, magnitude_prune, DistributionPolicy, MaskSet, PrunableSet};
use gradprune_core::recipes::{audit_recipe, bundled, compile_timeline, LrSpec, Recipe, BUNDLED};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- C1

/// Target after the last event at or before `step`, from the closed form
/// `k* = floor(((r + 1)·K − 1) / W)` for window offset `r`.
fn oracle_sparsity(recipe: &Recipe, spe: usize, step: usize) -> f64 {
    let s = recipe.sparsity.unwrap();
    let start = s.head_freeze_epochs * spe;
    let w = (recipe.total_epochs - s.head_freeze_epochs - s.tail_freeze_epochs) * spe;
    let k = s.prune_frequency_per_epoch * (recipe.total_epochs - s.head_freeze_epochs - s.tail_freeze_epochs);
    if step < start {
        return 0.0;
    }
    let r = step - start;
    let idx = if r >= w { k - 1 } else { (((r + 1) * k - 1) / w).min(k - 1) };
    let frac = 1.0 - idx as f64 / (k - 1) as f64;
    s.final_sparsity + (s.initial_sparsity - s.final_sparsity) * frac.powi(3)
}

fn oracle_lr(recipe: &Recipe, spe: usize, step: usize) -> f64 {
    let total = recipe.total_epochs * spe;
    match recipe.lr {
        LrSpec::CyclicLinear {
            lr_init,
            lr_final,
            cycle_length_epochs,
        } => {
            let c = (cycle_length_epochs * spe as f64).round() as usize;
            let pos = (step % c) as f64 / (c - 1) as f64;
            lr_init + (lr_final - lr_init) * pos
        }
        LrSpec::LinearDecay { lr_init } => lr_init * (total - step) as f64 / total as f64,
    }
}

fn c1() -> Outcome {
    let spe = 1000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for (name, _) in BUNDLED {
        let recipe = bundled(name).map_err(|e| e.to_string())?;
        let tl = compile_timeline(&recipe, spe).map_err(|e| e.to_string())?;
        let total = tl.total_steps();
        for _ in 0..10_000 {
            let step = rng.random_range(0..total);
            let lr_err = (tl.lr()[step] - oracle_lr(&recipe, spe, step)).abs();
            let sp_err = match recipe.sparsity {
                Some(_) => (tl.targets()[step] - oracle_sparsity(&recipe, spe, step)).abs(),
                None => tl.targets()[step].abs(),
            };
            worst = worst.max(lr_err).max(sp_err);
        }
        if let Some(s) = recipe.sparsity {
            let events: Vec<_> = tl.prune_events().collect();
            let (first, last) = (events[0], events[events.len() - 1]);
            ensure(first.2 == 0.70 && tl.targets()[first.0] == 0.70, || {
                format!("{name}: first prune target {}", first.2)
            })?;
            ensure(last.2 == s.final_sparsity && tl.targets()[total - 1] == s.final_sparsity, || {
                format!("{name}: final target {}", last.2)
            })?;
        }
        if let LrSpec::CyclicLinear {
            lr_final,
            cycle_length_epochs,
            ..
        } = recipe.lr
        {
            let c = (cycle_length_epochs * spe as f64).round() as usize;
            for end in (c - 1..total).step_by(c) {
                ensure(tl.lr()[end] == lr_final, || format!("{name}: lr {} at cycle end {end}", tl.lr()[end]))?;
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max abs error {worst:.3e}"))?;
    Ok(format!("max abs error {worst:.1e} over 4 x 10000 steps"))
}

// ---------------------------------------------------------------- C2

fn c2() -> Outcome {
    let spe = 1000;
    let compile = |name: &str| {
        compile_timeline(&bundled(name).map_err(|e| e.to_string())?, spe).map_err(|e| e.to_string())
    };
    let d10 = compile("downstream-10ep")?;
    let d30 = compile("downstream-30ep")?;
    let up = compile("upstream-3ep")?;
    let facts = [
        ("downstream-10ep events", d10.prune_events().count(), 60),
        ("downstream-10ep cycles", d10.cycle_count().unwrap_or(0), 5),
        ("downstream-30ep cycles", d30.cycle_count().unwrap_or(0), 15),
        ("upstream-3ep events", up.prune_events().count(), 200),
        (
            "upstream-3ep events in final epoch",
            up.prune_events().filter(|(s, _, _)| *s >= 2 * spe).count(),
            0,
        ),
    ];
    for (what, got, want) in facts {
        ensure(got == want, || format!("{what}: {got}, expected {want}"))?;
    }
    Ok("60 events / 5 cycles, 15 cycles, 200 events with none in epoch 3".into())
}

// ---------------------------------------------------------------- C3

/// Brute force: sort every surviving entry by (|w|, position) and prune
/// from the front.
fn oracle_prune(weights: &[Vec<f64>], keep: &[Vec<bool>], target: f64, policy: DistributionPolicy) -> Vec<Vec<bool>> {
    let mut out = keep.to_vec();
    let round_half_up = |x: f64| (x + 0.5 + 1e-9).floor() as usize;
    match policy {
        DistributionPolicy::Uniform => {
            for (t, w) in weights.iter().enumerate() {
                let n = w.len();
                let already = keep[t].iter().filter(|k| !**k).count();
                let want = round_half_up(target * n as f64).max(already);
                let mut alive: Vec<(f64, usize)> =
                    (0..n).filter(|&i| keep[t][i]).map(|i| (w[i].abs(), i)).collect();
                alive.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                for &(_, i) in &alive[..want - already] {
                    out[t][i] = false;
                }
            }
        }
        DistributionPolicy::Global => {
            let total: usize = weights.iter().map(Vec::len).sum();
            let already: usize = keep.iter().flatten().filter(|k| !**k).count();
            let want = ((target * total as f64) + 1e-9).floor() as usize;
            let want = want.max(already);
            let mut alive = Vec::new();
            for (t, w) in weights.iter().enumerate() {
                for i in 0..w.len() {
                    if keep[t][i] {
                        alive.push((w[i].abs(), t, i));
                    }
                }
            }
            alive.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
            for &(_, t, i) in &alive[..want - already] {
                out[t][i] = false;
            }
        }
    }
    out
}

fn random_weight(rng: &mut ChaCha8Rng) -> f64 {
    // A coarse grid produces plenty of exact and sign-flipped ties.
    if rng.random_bool(0.5) {
        rng.random_range(-8i32..=8) as f64 * 0.25
    } else {
        rng.random_range(-2.0..2.0)
    }
}

fn c3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut checks = 0usize;
    for case in 0..1000 {
        let tensors = rng.random_range(1..=3);
        let mut params = ParamSet::new();
        let mut names = Vec::new();
        for t in 0..tensors {
            // Log-uniform sizes up to 100 x 100.
            let rows = 10f64.powf(rng.random_range(0.0..2.0)).round() as usize;
            let cols = 10f64.powf(rng.random_range(0.0..2.0)).round() as usize;
            let data = (0..rows * cols).map(|_| random_weight(&mut rng)).collect();
            let name = format!("encoder.t{t}.weight");
            params
                .insert(name.clone(), Tensor::new(vec![rows, cols], data).unwrap())
                .unwrap();
            names.push(name);
        }
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let set = PrunableSet::new(&params, &refs).map_err(|e| e.to_string())?;
        let policy = if case % 2 == 0 {
            DistributionPolicy::Uniform
        } else {
            DistributionPolicy::Global
        };
        let mut targets: Vec<f64> = (0..100).map(|_| rng.random_range(0.0..0.99)).collect();
        targets.sort_by(f64::total_cmp);

        let mut masks = MaskSet::ones(&set);
        for (event, &target) in targets.iter().enumerate() {
            let weights: Vec<Vec<f64>> = names.iter().map(|n| params.get(n).unwrap().data().to_vec()).collect();
            let keep: Vec<Vec<bool>> = (0..names.len()).map(|i| masks.keep(i).to_vec()).collect();
            let next = magnitude_prune(&params, &masks, target, policy).map_err(|e| e.to_string())?;
            let want = oracle_prune(&weights, &keep, target, policy);
            for (i, w) in want.iter().enumerate() {
                ensure(next.keep(i) == w.as_slice(), || {
                    format!("case {case} event {event}: {policy:?} mask differs from oracle")
                })?;
            }
            checks += 1;
            ensure(next.contains_zeros_of(&masks), || format!("case {case} event {event}: mask regressed"))?;
            masks = next;
            apply_masks(&mut params, &masks).map_err(|e| e.to_string())?;
            // Drift the survivors so later events see new magnitudes.
            for n in &names {
                for v in params.get_mut(n).unwrap().data_mut() {
                    if *v != 0.0 {
                        *v += rng.random_range(-0.1..0.1);
                    }
                }
            }
            apply_masks(&mut params, &masks).map_err(|e| e.to_string())?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || format!("took {elapsed:.1?}"))?;
    Ok(format!("1000 cases, {checks} oracle comparisons, 100000 monotone events in {elapsed:.1?}"))
}

// ---------------------------------------------------------------- C4

fn c4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);

    // h = 0 returns the cross-entropy value and gradient bit for bit.
    let (batch, classes) = (5, 4);
    let s: Vec<f64> = (0..batch * classes).map(|_| rng.random_range(-3.0..3.0)).collect();
    let t: Vec<f64> = (0..batch * classes).map(|_| rng.random_range(-3.0..3.0)).collect();
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let grad_of = |use_kd: bool| {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![batch, classes], s.clone()).unwrap().with_requires_grad(true));
        let loss = if use_kd {
            kd_loss(&mut tape, x, &t, &labels, &KdConfig { hardness: 0.0, ..KdConfig::default() })
                .unwrap()
                .loss
        } else {
            cross_entropy(&mut tape, x, &labels).unwrap()
        };
        let g = tape.backward(loss).unwrap();
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        (tape.value(loss).item().to_bits(), bits(g.get(x).unwrap()))
    };
    ensure(grad_of(true) == grad_of(false), || "h=0 differs from cross-entropy".into())?;

    let mut worst_equal: f64 = 0.0;
    for _ in 0..100 {
        let logits: Vec<f64> = (0..classes * 3).map(|_| rng.random_range(-5.0..5.0)).collect();
        let cfg = KdConfig {
            hardness: 1.0,
            temperature: rng.random_range(0.5..10.0),
            kl_scaling: true,
        };
        let v = kd_loss_value(&logits, &logits, &[0, 1, 2], classes, &cfg).map_err(|e| e.to_string())?;
        worst_equal = worst_equal.max(v.abs());
    }
    ensure(worst_equal <= 1e-12, || format!("equal-logit KL {worst_equal:.3e}"))?;

    let worked = kd_loss_value(
        &[0.0, 2.0],
        &[2.0, 0.0],
        &[0],
        2,
        &KdConfig {
            hardness: 1.0,
            temperature: 1.0,
            kl_scaling: true,
        },
    )
    .map_err(|e| e.to_string())?;
    ensure((worked - 1.5232).abs() <= 1e-3, || format!("worked example {worked}"))?;

    let mut worst_rel: f64 = 0.0;
    for _ in 0..200 {
        let (b, c) = (rng.random_range(1..=4), rng.random_range(2..=6));
        let s: Vec<f64> = (0..b * c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let t: Vec<f64> = (0..b * c).map(|_| rng.random_range(-4.0..4.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..c)).collect();
        let cfg = KdConfig {
            hardness: rng.random_range(0.0..=1.0),
            temperature: rng.random_range(0.5..10.0),
            kl_scaling: true,
        };
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![b, c], s.clone()).unwrap().with_requires_grad(true));
        let out = kd_loss(&mut tape, x, &t, &labels, &cfg).map_err(|e| e.to_string())?;
        let analytic = tape.backward(out.loss).unwrap().get(x).unwrap().to_vec();
        let eps = 1e-5;
        let mut diff2 = 0.0;
        let mut norm2: f64 = 0.0;
        for i in 0..s.len() {
            let (mut up, mut down) = (s.clone(), s.clone());
            up[i] += eps;
            down[i] -= eps;
            let f = |v: &[f64]| kd_loss_value(v, &t, &labels, c, &cfg).unwrap();
            let numeric = (f(&up) - f(&down)) / (2.0 * eps);
            diff2 += (numeric - analytic[i]).powi(2);
            norm2 = norm2.max(numeric * numeric).max(analytic[i] * analytic[i]);
        }
        let rel = diff2.sqrt() / (norm2.sqrt() * (s.len() as f64).sqrt()).max(1e-8);
        worst_rel = worst_rel.max(rel);
    }
    ensure(worst_rel <= 1e-4, || format!("finite-difference rel err {worst_rel:.3e}"))?;
    Ok(format!(
        "h=0 bit-identical, equal-logit KL {worst_equal:.1e}, worked {worked:.4}, grad rel err {worst_rel:.1e}"
    ))
}

// ---------------------------------------------------------------- C5

fn c5() -> Outcome {
    let grid = [0.5, 1.0, 2.0, 5.5, 8.5, 10.0];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100 {
        let n = rng.random_range(2..=12);
        let scale = rng.random_range(0.1..20.0);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        let mut prev = f64::NEG_INFINITY;
        for &t in &grid {
            let h = entropy(&soften(&logits, t).map_err(|e| e.to_string())?);
            ensure(h >= prev - 1e-12, || format!("case {case}: entropy fell to {h} at T={t}"))?;
            prev = h;
        }
    }
    Ok("100 vectors, entropy non-decreasing over T in {0.5,1,2,5.5,8.5,10}".into())
}

// ---------------------------------------------------------------- C6

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn desk_task(train_size: usize) -> SyntheticTask {
    SyntheticTask {
        train_size,
        validation_size: 512,
        decoys: 2,
        ..SyntheticTask::default()
    }
}

/// Downstream 10-epoch recipe with rates scaled for a small model trained
/// from a dense checkpoint.
fn desk_recipe() -> Recipe {
    let mut r = bundled("downstream-10ep").unwrap();
    r.name = "desk-tuned".into();
    r.lr = LrSpec::CyclicLinear {
        lr_init: 1e-3,
        lr_final: 1e-5,
        cycle_length_epochs: 2.0,
    };
    r
}

fn edit(recipe: &Recipe, edits: &[(&str, serde_json::Value)]) -> Recipe {
    edits
        .iter()
        .fold(recipe.clone(), |r, (path, v)| set_field(&r, path, v.clone()).unwrap())
}

struct Arm {
    label: &'static str,
    row: SweepRow,
}

fn run_arm(label: &'static str, recipe: &Recipe, student: &Checkpoint, teacher: &TeacherHandle) -> Result<Arm, String> {
    let mut accuracies = Vec::new();
    for seed in SEEDS {
        let setup = RunSetup {
            recipe: recipe.clone(),
            task: desk_task(256),
            student: StudentInit::Checkpoint(Box::new(student.clone())),
            seed,
        };
        let out = run(&setup, Some(teacher)).map_err(|e| format!("{label} seed {seed}: {e}"))?;
        accuracies.push(out.metrics.summary.final_accuracy);
    }
    Ok(Arm {
        label,
        row: SweepRow {
            value: json!(label),
            accuracies,
            failed: Vec::new(),
        },
    })
}

/// `a ≥ b` on seed means, with a gap of at most one pooled sample std
/// treated as inconclusive.
fn compare(a: &Arm, b: &Arm) -> (bool, String) {
    let gap = a.row.mean() - b.row.mean();
    let pooled = ((a.row.std().powi(2) + b.row.std().powi(2)) / 2.0).sqrt();
    let verdict = if gap > pooled {
        "holds"
    } else if gap >= -pooled {
        "inconclusive"
    } else {
        "reversed"
    };
    (
        gap > pooled,
        format!(
            "{} {:.4}±{:.4} vs {} {:.4}±{:.4}: {verdict}",
            a.label,
            a.row.mean(),
            a.row.std(),
            b.label,
            b.row.mean(),
            b.row.std()
        ),
    )
}

fn c6() -> Outcome {
    let start = Instant::now();
    let teacher_task = desk_task(2048);
    let cfg = default_model_for(&teacher_task);
    let training = TeacherTraining {
        epochs: 5,
        batch_size: 16,
        ..TeacherTraining::default()
    };
    let dense = train_teacher(&teacher_task, &cfg, &training).map_err(|e| e.to_string())?;
    let teacher = TeacherHandle::from_checkpoint(dense.clone());

    let star = desk_recipe();
    let naive = edit(
        &star,
        &[
            ("sparsity.initial_sparsity", json!(0.0)),
            ("kd.hardness", json!(0.0)),
            ("lr", json!({"kind": "linear_decay", "lr_init": 1e-3})),
        ],
    );
    let star_si0 = edit(&star, &[("sparsity.initial_sparsity", json!(0.0))]);
    let star90 = edit(&star, &[("sparsity.final_sparsity", json!(0.90))]);
    let star90_h06 = edit(&star90, &[("kd.hardness", json!(0.6))]);

    let a = run_arm("tuned@0.97", &star, &dense, &teacher)?;
    let b = run_arm("naive@0.97", &naive, &dense, &teacher)?;
    let c = run_arm("s_i=0.0@0.97", &star_si0, &dense, &teacher)?;
    let d = run_arm("h=1.0@0.90", &star90, &dense, &teacher)?;
    let e = run_arm("h=0.6@0.90", &star90_h06, &dense, &teacher)?;
    let elapsed = start.elapsed();

    let results = [compare(&a, &b), compare(&a, &c), compare(&d, &e)];
    let mut lines = vec![format!(
        "{} params, teacher accuracy {:.4}, {elapsed:.0?}",
        cfg.param_count(),
        dense.metadata.validation_accuracy.unwrap_or(f64::NAN)
    )];
    for ((ok, text), tag) in results.iter().zip(["(a)", "(b)", "(c)"]) {
        lines.push(format!("    {tag} {} {text}", if *ok { "ok" } else { "FAIL" }));
    }
    let within_budget = elapsed < Duration::from_secs(15 * 60);
    if !within_budget {
        lines.push("    runtime over 15 min".into());
    }
    let detail = lines.join("\n");
    if results.iter().all(|(ok, _)| *ok) && within_budget {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- C7

fn c7() -> Outcome {
    let teacher_task = SyntheticTask {
        train_size: 256,
        validation_size: 128,
        decoys: 2,
        ..SyntheticTask::default()
    };
    let cfg = default_model_for(&teacher_task);
    let dense = train_teacher(
        &teacher_task,
        &cfg,
        &TeacherTraining {
            epochs: 1,
            ..TeacherTraining::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let teacher = TeacherHandle::from_checkpoint(dense.clone());
    let mut recipe = desk_recipe();
    recipe.kd.hardness = 0.6;
    let setup = RunSetup {
        recipe,
        task: SyntheticTask {
            train_size: 160,
            validation_size: 64,
            ..teacher_task
        },
        student: StudentInit::Checkpoint(Box::new(dense)),
        seed: 11,
    };
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (x, y) = (dir.path().join("x"), dir.path().join("y"));
    for out in [&x, &y] {
        run_to_dir(&setup, Some(&teacher), out).map_err(|e| e.to_string())?;
    }
    let mut files = vec!["metrics.csv".to_string(), "summary.json".to_string()];
    for f in fs::read_dir(x.join("checkpoint")).map_err(|e| e.to_string())? {
        files.push(format!("checkpoint/{}", f.map_err(|e| e.to_string())?.file_name().to_string_lossy()));
    }
    files.sort();
    let read = |root: &Path, f: &str| fs::read(root.join(f)).map_err(|e| format!("{f}: {e}"));
    for f in &files {
        ensure(read(&x, f)? == read(&y, f)?, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} files byte-identical across two runs", files.len()))
}

// ---------------------------------------------------------------- C8

fn c8() -> Outcome {
    let mut dirty = Vec::new();
    for (name, _) in BUNDLED {
        let report = audit_recipe(&bundled(name).map_err(|e| e.to_string())?);
        dirty.extend(report.diffs.iter().map(|d| format!("{name}: {d}")));
    }
    ensure(dirty.is_empty(), || dirty.join("; "))?;
    Ok(format!("{} bundled recipes, no diffs", BUNDLED.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, fn() -> Outcome); 8] = [
        ("C1", "schedule oracle", c1),
        ("C2", "event counts", c2),
        ("C3", "pruning oracle", c3),
        ("C4", "distillation loss", c4),
        ("C5", "entropy monotonicity", c5),
        ("C6", "desk-scale trends", c6),
        ("C7", "determinism", c7),
        ("C8", "recipe audit", c8),
    ];
    let only: Option<Vec<String>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').map(|s| s.trim().to_uppercase()).collect());
    let mut failed = 0;
    for (id, title, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.iter().any(|x| x == id)) {
            continue;
        }
        let start = Instant::now();
        let (status, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{id} {status} {title} ({:.1?}): {detail}", start.elapsed());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}

//! Magnitude pruning over a declared prunable set with cumulative masks.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::models::{param_group, ParamGroup};
use crate::numerics::ParamSet;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruningError {
    #[error("target sparsity {0} outside [0, 1]")]
    TargetOutOfRange(f64),
    #[error("target sparsity {target} is below the current level {current}; masks never shrink")]
    TargetBelowCurrent { target: f64, current: f64 },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("parameter `{0}` is not eligible for pruning")]
    NotPrunable(String),
    #[error("`{name}`: mask shape {mask:?} does not match parameter shape {param:?}")]
    ShapeMismatch {
        name: String,
        mask: Vec<usize>,
        param: Vec<usize>,
    },
    #[error("`{0}` contains a non-finite weight")]
    NonFinite(String),
    #[error("mask set does not cover prunable tensor `{0}`")]
    MaskMismatch(String),
    #[error("malformed mask data: {0}")]
    Malformed(String),
}

/// How a target sparsity is distributed over the prunable tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionPolicy {
    #[default]
    Uniform,
    Global,
}

/// True for the tensors counted in sparsity: 2-D encoder weight matrices.
pub fn is_prunable(name: &str, shape: &[usize]) -> bool {
    param_group(name) == Some(ParamGroup::Encoder) && name.ends_with(".weight") && shape.len() == 2
}

/// Ordered list of parameters eligible for pruning.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunableSet {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    total: usize,
}

impl PrunableSet {
    /// Every parameter accepted by [`is_prunable`], in parameter order.
    pub fn from_params(params: &ParamSet) -> Self {
        let (names, shapes) = params
            .iter()
            .filter(|(n, t)| is_prunable(n, t.shape()))
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .unzip();
        Self::from_parts(names, shapes)
    }

    /// An explicit selection; each name must exist and be eligible.
    pub fn new(params: &ParamSet, names: &[&str]) -> Result<Self, PruningError> {
        let mut shapes = Vec::with_capacity(names.len());
        for &name in names {
            let t = params
                .get(name)
                .ok_or_else(|| PruningError::UnknownParameter(name.to_string()))?;
            if !is_prunable(name, t.shape()) {
                return Err(PruningError::NotPrunable(name.to_string()));
            }
            shapes.push(t.shape().to_vec());
        }
        Ok(Self::from_parts(
            names.iter().map(|s| s.to_string()).collect(),
            shapes,
        ))
    }

    fn from_parts(names: Vec<String>, shapes: Vec<Vec<usize>>) -> Self {
        let total = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        Self {
            names,
            shapes,
            total,
        }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Per-tensor keep masks (`true` = kept) aligned with a [`PrunableSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSet {
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    keep: Vec<Vec<bool>>,
    level: f64,
}

impl MaskSet {
    /// All-ones masks at level 0.
    pub fn ones(prunable: &PrunableSet) -> Self {
        Self {
            names: prunable.names.clone(),
            shapes: prunable.shapes.clone(),
            keep: prunable
                .shapes
                .iter()
                .map(|s| vec![true; s.iter().product()])
                .collect(),
            level: 0.0,
        }
    }

    /// Builds masks from explicit keep flags. The recorded level is the
    /// achieved sparsity.
    pub fn from_keep(
        entries: Vec<(String, Vec<usize>, Vec<bool>)>,
    ) -> Result<Self, PruningError> {
        let mut set = Self {
            names: Vec::new(),
            shapes: Vec::new(),
            keep: Vec::new(),
            level: 0.0,
        };
        for (name, shape, keep) in entries {
            if shape.iter().product::<usize>() != keep.len() {
                return Err(PruningError::Malformed(format!(
                    "`{name}` has {} flags for shape {shape:?}",
                    keep.len()
                )));
            }
            if set.names.contains(&name) {
                return Err(PruningError::Malformed(format!("duplicate mask `{name}`")));
            }
            set.names.push(name);
            set.shapes.push(shape);
            set.keep.push(keep);
        }
        set.level = set.sparsity();
        Ok(set)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn shape(&self, i: usize) -> &[usize] {
        &self.shapes[i]
    }

    pub fn keep(&self, i: usize) -> &[bool] {
        &self.keep[i]
    }

    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.keep[i].as_slice())
    }

    /// Highest target sparsity applied so far. Targets below it are rejected.
    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn pruned(&self) -> usize {
        self.keep.iter().flatten().filter(|k| !**k).count()
    }

    pub fn total(&self) -> usize {
        self.keep.iter().map(Vec::len).sum()
    }

    /// Achieved sparsity: pruned / total over all masked tensors.
    pub fn sparsity(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.pruned() as f64 / total as f64
        }
    }

    /// True when every entry pruned in `earlier` is also pruned here.
    pub fn contains_zeros_of(&self, earlier: &MaskSet) -> bool {
        self.names == earlier.names
            && self
                .keep
                .iter()
                .zip(&earlier.keep)
                .all(|(now, before)| now.iter().zip(before).all(|(n, b)| *b || !*n))
    }

    fn check_params(&self, params: &ParamSet) -> Result<(), PruningError> {
        for (name, shape) in self.names.iter().zip(&self.shapes) {
            let t = params
                .get(name)
                .ok_or_else(|| PruningError::UnknownParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(PruningError::ShapeMismatch {
                    name: name.clone(),
                    mask: shape.clone(),
                    param: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Packs the keep flags LSB-first (bit set = kept), one byte-aligned
    /// block per tensor, returned with per-tensor byte offsets.
    pub fn pack(&self) -> (Vec<u8>, Vec<usize>) {
        let mut bytes = Vec::new();
        let mut offsets = Vec::with_capacity(self.keep.len());
        for keep in &self.keep {
            offsets.push(bytes.len());
            for chunk in keep.chunks(8) {
                let mut b = 0u8;
                for (bit, &k) in chunk.iter().enumerate() {
                    b |= (k as u8) << bit;
                }
                bytes.push(b);
            }
        }
        (bytes, offsets)
    }

    /// Inverse of [`MaskSet::pack`].
    pub fn unpack(
        layout: Vec<(String, Vec<usize>, usize)>,
        bytes: &[u8],
        level: f64,
    ) -> Result<Self, PruningError> {
        let mut entries = Vec::with_capacity(layout.len());
        for (name, shape, offset) in layout {
            let n: usize = shape.iter().product();
            let len = n.div_ceil(8);
            let block = bytes.get(offset..offset + len).ok_or_else(|| {
                PruningError::Malformed(format!("`{name}` extends past the mask data"))
            })?;
            let keep = (0..n).map(|i| block[i / 8] >> (i % 8) & 1 == 1).collect();
            entries.push((name, shape, keep));
        }
        let mut set = Self::from_keep(entries)?;
        if !(0.0..=1.0).contains(&level) {
            return Err(PruningError::Malformed(format!("level {level} out of range")));
        }
        set.level = level;
        Ok(set)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5 + 1e-9).floor().max(0.0) as usize
}

/// Number of entries a tensor of `n` weights prunes at `target` under the
/// uniform policy.
pub fn uniform_count(target: f64, n: usize) -> usize {
    round_half_up(target * n as f64).min(n)
}

/// Number of entries pruned at `target` under the global policy.
pub fn global_count(target: f64, total: usize) -> usize {
    ((target * total as f64 + 1e-9).floor() as usize).min(total)
}

fn by_magnitude(a: (f64, usize), b: (f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Extends `masks` so the prunable set reaches `target` sparsity.
///
/// Already-pruned entries stay pruned and count toward the target. New
/// entries are chosen by ascending |w|; ties go to the lower flat index,
/// and under the global policy to the earlier tensor first.
pub fn magnitude_prune(
    params: &ParamSet,
    masks: &MaskSet,
    target: f64,
    policy: DistributionPolicy,
) -> Result<MaskSet, PruningError> {
    if !(0.0..=1.0).contains(&target) {
        return Err(PruningError::TargetOutOfRange(target));
    }
    if target < masks.level {
        return Err(PruningError::TargetBelowCurrent {
            target,
            current: masks.level,
        });
    }
    masks.check_params(params)?;
    let weights: Vec<&[f64]> = masks
        .names
        .iter()
        .map(|n| params.get(n).expect("checked").data())
        .collect();
    for (name, w) in masks.names.iter().zip(&weights) {
        if w.iter().any(|x| !x.is_finite()) {
            return Err(PruningError::NonFinite(name.clone()));
        }
    }

    let mut out = masks.clone();
    out.level = target;
    match policy {
        DistributionPolicy::Uniform => {
            for (keep, w) in out.keep.iter_mut().zip(&weights) {
                let already = keep.iter().filter(|k| !**k).count();
                let want = uniform_count(target, keep.len()).max(already);
                let mut alive: Vec<(f64, usize)> = keep
                    .iter()
                    .enumerate()
                    .filter(|(_, k)| **k)
                    .map(|(i, _)| (w[i].abs(), i))
                    .collect();
                let extra = want - already;
                if extra == 0 {
                    continue;
                }
                if extra < alive.len() {
                    alive.select_nth_unstable_by(extra - 1, |a, b| by_magnitude(*a, *b));
                }
                for &(_, i) in &alive[..extra] {
                    keep[i] = false;
                }
            }
        }
        DistributionPolicy::Global => {
            let total = out.total();
            let already = out.pruned();
            let want = global_count(target, total).max(already);
            let extra = want - already;
            if extra > 0 {
                // Flat index over the concatenated tensors encodes the tie rule.
                let mut alive = Vec::with_capacity(total - already);
                let mut base = 0;
                for (keep, w) in out.keep.iter().zip(&weights) {
                    for (i, &k) in keep.iter().enumerate() {
                        if k {
                            alive.push((w[i].abs(), base + i));
                        }
                    }
                    base += keep.len();
                }
                if extra < alive.len() {
                    alive.select_nth_unstable_by(extra - 1, |a, b| by_magnitude(*a, *b));
                }
                let starts: Vec<usize> = out
                    .keep
                    .iter()
                    .scan(0, |acc, k| {
                        let s = *acc;
                        *acc += k.len();
                        Some(s)
                    })
                    .collect();
                for &(_, flat) in &alive[..extra] {
                    let t = starts.partition_point(|&s| s <= flat) - 1;
                    out.keep[t][flat - starts[t]] = false;
                }
            }
        }
    }
    Ok(out)
}

/// Writes +0.0 into every masked entry.
pub fn apply_masks(params: &mut ParamSet, masks: &MaskSet) -> Result<(), PruningError> {
    masks.check_params(params)?;
    for (name, keep) in masks.names.iter().zip(&masks.keep) {
        let t = params.get_mut(name).expect("checked");
        for (w, &k) in t.data_mut().iter_mut().zip(keep) {
            if !k {
                *w = 0.0;
            }
        }
    }
    Ok(())
}

/// Zeroes the stored gradient of every masked entry.
pub fn mask_grads(params: &mut ParamSet, masks: &MaskSet) -> Result<(), PruningError> {
    masks.check_params(params)?;
    for (name, keep) in masks.names.iter().zip(&masks.keep) {
        let t = params.get_mut(name).expect("checked");
        if let Some(g) = t.grad_mut() {
            for (g, &k) in g.iter_mut().zip(keep) {
                if !k {
                    *g = 0.0;
                }
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorSparsity {
    pub name: String,
    pub pruned: usize,
    pub total: usize,
    pub sparsity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub aggregate: f64,
    pub pruned: usize,
    pub total: usize,
    pub tensors: Vec<TensorSparsity>,
}

/// Per-tensor and aggregate sparsity of `masks` over `prunable`.
pub fn sparsity_report(
    masks: &MaskSet,
    prunable: &PrunableSet,
) -> Result<SparsityReport, PruningError> {
    let mut tensors = Vec::with_capacity(prunable.len());
    for (name, shape) in prunable.names.iter().zip(&prunable.shapes) {
        let keep = masks
            .get(name)
            .ok_or_else(|| PruningError::MaskMismatch(name.clone()))?;
        let total: usize = shape.iter().product();
        if keep.len() != total {
            return Err(PruningError::MaskMismatch(name.clone()));
        }
        let pruned = keep.iter().filter(|k| !**k).count();
        tensors.push(TensorSparsity {
            name: name.clone(),
            pruned,
            total,
            sparsity: pruned as f64 / total as f64,
        });
    }
    let pruned = tensors.iter().map(|t| t.pruned).sum();
    let total = prunable.total;
    Ok(SparsityReport {
        aggregate: if total == 0 {
            0.0
        } else {
            pruned as f64 / total as f64
        },
        pruned,
        total,
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use proptest::prelude::*;

    fn params(tensors: &[(&str, Vec<f64>)]) -> ParamSet {
        let mut p = ParamSet::new();
        for (name, data) in tensors {
            p.insert(*name, Tensor::new(vec![1, data.len()], data.clone()).unwrap())
                .unwrap();
        }
        p
    }

    fn pruned_values(p: &ParamSet, m: &MaskSet) -> Vec<f64> {
        let mut out = Vec::new();
        for (i, name) in m.names().iter().enumerate() {
            let w = p.get(name).unwrap().data();
            for (j, &k) in m.keep(i).iter().enumerate() {
                if !k {
                    out.push(w[j]);
                }
            }
        }
        out
    }

    #[test]
    fn uniform_prunes_two_smallest_of_five() {
        let p = params(&[("encoder.a.weight", vec![3.0, -1.0, 0.5, -0.2, 4.0])]);
        let set = PrunableSet::from_params(&p);
        let m = magnitude_prune(&p, &MaskSet::ones(&set), 0.4, DistributionPolicy::Uniform).unwrap();
        assert_eq!(m.keep(0), &[true, true, false, false, true]);
        let mut v = pruned_values(&p, &m);
        v.sort_by(f64::total_cmp);
        assert_eq!(v, vec![-0.2, 0.5]);
    }

    #[test]
    fn global_prunes_across_tensors() {
        let p = params(&[
            ("encoder.a.weight", vec![5.0, 0.1]),
            ("encoder.b.weight", vec![0.2, 0.3, 4.0]),
        ]);
        let set = PrunableSet::from_params(&p);
        let m = magnitude_prune(&p, &MaskSet::ones(&set), 0.4, DistributionPolicy::Global).unwrap();
        assert_eq!(pruned_values(&p, &m), vec![0.1, 0.2]);
        let r = sparsity_report(&m, &set).unwrap();
        assert_eq!(r.tensors[0].sparsity, 0.5);
        assert_eq!(r.tensors[1].sparsity, 1.0 / 3.0);
        assert_eq!(r.aggregate, 0.4);
    }

    #[test]
    fn zero_target_leaves_masks_unchanged() {
        let p = params(&[("encoder.a.weight", vec![1.0, 2.0, 0.0])]);
        let set = PrunableSet::from_params(&p);
        let ones = MaskSet::ones(&set);
        for policy in [DistributionPolicy::Uniform, DistributionPolicy::Global] {
            let m = magnitude_prune(&p, &ones, 0.0, policy).unwrap();
            assert_eq!(m, ones);
        }
        assert_eq!(sparsity_report(&ones, &set).unwrap().aggregate, 0.0);
    }

    #[test]
    fn ties_go_to_lower_index_then_earlier_tensor() {
        let p = params(&[
            ("encoder.a.weight", vec![1.0, -1.0, 1.0]),
            ("encoder.b.weight", vec![-1.0, 1.0]),
        ]);
        let set = PrunableSet::from_params(&p);
        let m = magnitude_prune(&p, &MaskSet::ones(&set), 0.6, DistributionPolicy::Global).unwrap();
        assert_eq!(m.keep(0), &[false, false, false]);
        assert_eq!(m.keep(1), &[true, true]);
        let u = magnitude_prune(&p, &MaskSet::ones(&set), 0.5, DistributionPolicy::Uniform).unwrap();
        assert_eq!(u.keep(0), &[false, false, true]);
        assert_eq!(u.keep(1), &[false, true]);
    }

    #[test]
    fn lower_target_is_rejected() {
        let p = params(&[("encoder.a.weight", vec![1.0, 2.0, 3.0, 4.0])]);
        let set = PrunableSet::from_params(&p);
        let m = magnitude_prune(&p, &MaskSet::ones(&set), 0.5, DistributionPolicy::Uniform).unwrap();
        let err = magnitude_prune(&p, &m, 0.25, DistributionPolicy::Uniform).unwrap_err();
        assert!(matches!(err, PruningError::TargetBelowCurrent { .. }));
        assert!(magnitude_prune(&p, &m, 1.5, DistributionPolicy::Uniform).is_err());
    }

    #[test]
    fn excluded_groups_are_not_prunable() {
        let mut p = ParamSet::new();
        for name in [
            "embedding.token.weight",
            "encoder.layer0.attention.query.bias",
            "encoder.layer0.ffn.norm.gamma",
            "head.classifier.weight",
            "encoder.layer0.ffn.output.weight",
        ] {
            let shape: &[usize] = if name.ends_with("weight") { &[2, 2] } else { &[2] };
            p.insert(name, Tensor::zeros(shape)).unwrap();
        }
        let set = PrunableSet::from_params(&p);
        assert_eq!(set.names(), &["encoder.layer0.ffn.output.weight".to_string()]);
        assert_eq!(set.total(), 4);
        assert!(matches!(
            PrunableSet::new(&p, &["head.classifier.weight"]),
            Err(PruningError::NotPrunable(_))
        ));
        assert!(PrunableSet::new(&p, &["missing"]).is_err());
    }

    #[test]
    fn apply_masks_writes_positive_zero_and_checks_shapes() {
        let mut p = params(&[("encoder.a.weight", vec![-3.0, 2.0])]);
        let set = PrunableSet::from_params(&p);
        let ones = MaskSet::ones(&set);
        apply_masks(&mut p, &ones).unwrap();
        assert_eq!(p.get("encoder.a.weight").unwrap().data(), &[-3.0, 2.0]);
        let m = magnitude_prune(&p, &ones, 1.0, DistributionPolicy::Uniform).unwrap();
        apply_masks(&mut p, &m).unwrap();
        for w in p.get("encoder.a.weight").unwrap().data() {
            assert_eq!(w.to_bits(), 0.0f64.to_bits());
        }
        let other = params(&[("encoder.a.weight", vec![1.0, 2.0, 3.0])]);
        let mut other = other;
        assert!(matches!(
            apply_masks(&mut other, &m),
            Err(PruningError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn pack_round_trips() {
        let m = MaskSet::from_keep(vec![
            ("x".into(), vec![3, 3], (0..9).map(|i| i % 3 != 0).collect()),
            ("y".into(), vec![1, 2], vec![false, true]),
        ])
        .unwrap();
        let (bytes, offsets) = m.pack();
        assert_eq!(offsets, vec![0, 2]);
        assert_eq!(bytes[0], 0b1011_0110);
        let layout = m
            .names()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), m.shape(i).to_vec(), offsets[i]))
            .collect();
        assert_eq!(MaskSet::unpack(layout, &bytes, m.level()).unwrap(), m);
    }

    proptest! {
        #[test]
        fn uniform_per_tensor_error_within_half_entry(
            sizes in prop::collection::vec(1usize..300, 1..6),
            target in 0.0f64..=1.0,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut p = ParamSet::new();
            for (i, n) in sizes.iter().enumerate() {
                let data = (0..*n).map(|_| rng.random_range(-1.0..1.0)).collect();
                p.insert(format!("encoder.t{i}.weight"), Tensor::new(vec![1, *n], data).unwrap()).unwrap();
            }
            let set = PrunableSet::from_params(&p);
            let m = magnitude_prune(&p, &MaskSet::ones(&set), target, DistributionPolicy::Uniform).unwrap();
            let r = sparsity_report(&m, &set).unwrap();
            for t in &r.tensors {
                prop_assert!((t.sparsity - target).abs() <= 0.5 / t.total as f64 + 1e-12);
            }
            let min = *sizes.iter().min().unwrap() as f64;
            prop_assert!((r.aggregate - target).abs() <= 1.0 / min);
        }
    }
}

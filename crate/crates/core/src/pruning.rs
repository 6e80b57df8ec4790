//! Binary masks over prunable weights, global magnitude pruning, sparsity
//! accounting, and lottery-ticket resets.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::nn::{BnStats, DenseModel};

/// Keep (`true`) / pruned (`false`) flag for every prunable weight.
///
/// `segments` are the parameter ranges of the prunable layers, so mask entry
/// `j` maps to a unique parameter index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    bits: Vec<bool>,
    segments: Vec<Range<usize>>,
}

impl Mask {
    pub fn from_parts(segments: Vec<Range<usize>>, bits: Vec<bool>) -> Result<Self> {
        let len: usize = segments.iter().map(|r| r.len()).sum();
        if len != bits.len() {
            return Err(Error::Alignment(format!("{} mask bits for {len} prunable weights", bits.len())));
        }
        for pair in segments.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(Error::Alignment("mask segments overlap or are unordered".into()));
            }
        }
        Ok(Self { bits, segments })
    }

    /// All-ones mask for `model`.
    pub fn dense_for(model: &DenseModel) -> Self {
        Self { bits: vec![true; model.prunable_count()], segments: model.prunable_ranges().to_vec() }
    }

    pub fn from_bits_for(model: &DenseModel, bits: Vec<bool>) -> Result<Self> {
        Self::from_parts(model.prunable_ranges().to_vec(), bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn segments(&self) -> &[Range<usize>] {
        &self.segments
    }

    pub fn survivors(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn zeros(&self) -> usize {
        self.len() - self.survivors()
    }

    pub fn check_aligned(&self, model: &DenseModel) -> Result<()> {
        if self.segments.as_slice() != model.prunable_ranges() {
            return Err(Error::Alignment(format!(
                "mask covers {} weights in {} layers; model has {} in {}",
                self.len(),
                self.segments.len(),
                model.prunable_count(),
                model.prunable_ranges().len()
            )));
        }
        Ok(())
    }

    /// `(mask index, parameter index, kept)` for every prunable weight.
    pub fn positions(&self) -> impl Iterator<Item = (usize, usize, bool)> + '_ {
        self.segments.iter().flat_map(|r| r.clone()).zip(&self.bits).enumerate().map(|(j, (p, &b))| (j, p, b))
    }

    /// Index of the segment (prunable layer) holding mask entry `j`.
    fn layer_of(&self) -> Vec<usize> {
        self.segments.iter().enumerate().flat_map(|(l, r)| std::iter::repeat_n(l, r.len())).collect()
    }

    /// Whether parameter `index` survives; non-prunable parameters always do.
    pub fn keeps_param(&self, index: usize) -> bool {
        let mut offset = 0;
        for r in &self.segments {
            if r.contains(&index) {
                return self.bits[offset + index - r.start];
            }
            offset += r.len();
        }
        true
    }

    /// Zeroes every pruned position of a full parameter vector.
    pub fn apply_to(&self, params: &mut [f32]) {
        for (_, p, keep) in self.positions() {
            if !keep {
                params[p] = 0.0;
            }
        }
    }

    pub fn zero_pruned_f64(&self, values: &mut [f64]) {
        for (_, p, keep) in self.positions() {
            if !keep {
                values[p] = 0.0;
            }
        }
    }

    /// First pruned position holding a non-zero value, if any.
    pub fn closure_violation(&self, params: &[f32]) -> Option<(usize, f32)> {
        self.positions().find(|&(_, p, keep)| !keep && params[p] != 0.0).map(|(_, p, _)| (p, params[p]))
    }

    /// Every bit kept here is also kept in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.len() == other.len() && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    /// Fraction of prunable weights that are pruned.
    pub sparsity: f64,
    pub per_layer: Vec<f64>,
    pub surviving: usize,
    pub total: usize,
}

pub fn sparsity(mask: &Mask) -> SparsityReport {
    let total = mask.len();
    let surviving = mask.survivors();
    let mut per_layer = Vec::with_capacity(mask.segments.len());
    let mut offset = 0;
    for r in &mask.segments {
        let bits = &mask.bits[offset..offset + r.len()];
        let zeros = bits.iter().filter(|&&b| !b).count();
        per_layer.push(if bits.is_empty() { 0.0 } else { zeros as f64 / bits.len() as f64 });
        offset += r.len();
    }
    let sparsity = if total == 0 { 0.0 } else { (total - surviving) as f64 / total as f64 };
    SparsityReport { sparsity, per_layer, surviving, total }
}

/// Prunes `floor(p * survivors)` of the surviving weights with the smallest
/// magnitude, ranked globally across layers. Ties go to the lower flat index.
/// The last survivor of any layer is skipped and the next-smallest weight is
/// taken instead.
pub fn magnitude_prune(model: &DenseModel, mask: &Mask, p: f64) -> Result<Mask> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::Domain(format!("pruning rate {p} outside (0, 1)")));
    }
    mask.check_aligned(model)?;
    let layer_of = mask.layer_of();
    let mut alive = vec![0usize; mask.segments.len()];
    for (j, &keep) in mask.bits.iter().enumerate() {
        if keep {
            alive[layer_of[j]] += 1;
        }
    }
    if let Some(l) = alive.iter().position(|&a| a == 0) {
        return Err(Error::Precondition(format!("prunable layer {l} has no surviving weights")));
    }

    let params = model.params();
    let mut candidates: Vec<(f32, usize, usize)> = mask
        .positions()
        .filter(|&(_, _, keep)| keep)
        .map(|(j, pi, _)| (params[pi].abs(), pi, j))
        .collect();
    let quota = (p * candidates.len() as f64).floor() as usize;
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut bits = mask.bits.clone();
    let mut pruned = 0;
    for &(_, _, j) in &candidates {
        if pruned == quota {
            break;
        }
        let layer = layer_of[j];
        if alive[layer] == 1 {
            continue;
        }
        bits[j] = false;
        alive[layer] -= 1;
        pruned += 1;
    }
    Ok(Mask { bits, segments: mask.segments.clone() })
}

/// Copy of `model` with every pruned weight set to exactly zero.
pub fn apply_mask(model: &DenseModel, mask: &Mask) -> Result<DenseModel> {
    mask.check_aligned(model)?;
    let mut out = model.clone();
    mask.apply_to(out.params_mut());
    Ok(out)
}

/// Initial parameters and batchnorm statistics of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct InitSnapshot {
    params: Vec<f32>,
    bn: Vec<BnStats>,
}

impl InitSnapshot {
    pub fn capture(model: &DenseModel) -> Self {
        Self { params: model.params().to_vec(), bn: model.bn_stats().to_vec() }
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }
}

/// Lottery-ticket reset: every parameter back to its initial value, pruned
/// weights kept at zero. Optimizer moments are the caller's to reset.
pub fn reset_to_init(model: &DenseModel, snapshot: &InitSnapshot, mask: &Mask) -> Result<DenseModel> {
    if snapshot.params.len() != model.param_count() {
        return Err(Error::Shape(format!(
            "snapshot has {} parameters, model has {}",
            snapshot.params.len(),
            model.param_count()
        )));
    }
    mask.check_aligned(model)?;
    let mut out = model.clone();
    out.set_params(&snapshot.params)?;
    out.set_bn_stats(snapshot.bn.clone())?;
    mask.apply_to(out.params_mut());
    Ok(out)
}

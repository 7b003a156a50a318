//! Global unstructured L1 pruning: every dense and conv weight competes in
//! one pool and the smallest magnitudes are masked to zero. Biases and
//! factorized layers are never pruned.

use alloc::vec::Vec;

use super::within_threshold;
use crate::model::{evaluate, Dataset, EpochObserver, Mask, Model, Split, TrainConfig, TrainSummary, Trainer};
use crate::{Error, Result};

/// Position of one prunable weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WeightRef {
    pub layer: usize,
    pub index: usize,
}

/// All prunable weights ordered by ascending `|w|`, ties broken by
/// `(layer, index)`.
pub fn rank_weights_global(model: &Model) -> Vec<WeightRef> {
    let mut pool: Vec<(f32, WeightRef)> = Vec::with_capacity(model.weight_count());
    for (layer, l) in model.layers().iter().enumerate() {
        if let Some(w) = l.prunable() {
            pool.extend(
                w.iter()
                    .enumerate()
                    .map(|(index, v)| (v.abs(), WeightRef { layer, index })),
            );
        }
    }
    pool.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    pool.into_iter().map(|(_, r)| r).collect()
}

/// `floor(rate · total)`, with a little slack so grid rates such as 0.29
/// are not pushed one weight short by binary rounding.
pub fn pruned_count(rate: f64, total: usize) -> usize {
    let raw = rate * total as f64;
    (libm::floor(raw + 1e-9 * raw.max(1.0)) as usize).min(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneStats {
    /// Removed prunable weights over all prunable weights.
    pub overall_rate: f64,
    /// `(layer index, removed fraction)` for every prunable layer.
    pub per_layer_rates: Vec<(usize, f64)>,
    pub pruned: usize,
    pub total: usize,
}

impl PruneStats {
    pub fn of(model: &Model) -> Self {
        let mut per_layer_rates = Vec::new();
        let mut pruned = 0;
        let mut total = 0;
        for (idx, layer) in model.layers().iter().enumerate() {
            if let Some(w) = layer.prunable() {
                let removed = layer.mask().map_or(0, Mask::removed);
                pruned += removed;
                total += w.len();
                per_layer_rates.push((idx, removed as f64 / w.len() as f64));
            }
        }
        let overall_rate = if total == 0 { 0.0 } else { pruned as f64 / total as f64 };
        Self {
            overall_rate,
            per_layer_rates,
            pruned,
            total,
        }
    }

    pub fn min_layer_rate(&self) -> Option<f64> {
        self.per_layer_rates.iter().map(|r| r.1).reduce(f64::min)
    }

    pub fn max_layer_rate(&self) -> Option<f64> {
        self.per_layer_rates.iter().map(|r| r.1).reduce(f64::max)
    }
}

/// Masks the `floor(rate·N)` smallest-magnitude weights of `model`.
/// Existing masks are replaced; a rate that removes nothing returns the
/// model unchanged.
pub fn apply_prune(model: &Model, rate: f64) -> Result<(Model, PruneStats)> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::RateOutOfRange(rate));
    }
    let order = rank_weights_global(model);
    let count = pruned_count(rate, order.len());
    let mut out = model.clone();
    if count == 0 {
        let stats = PruneStats::of(&out);
        return Ok((out, stats));
    }
    let mut masks: Vec<Option<Mask>> = model
        .layers()
        .iter()
        .map(|l| l.prunable().map(|w| Mask::all_kept(w.len())))
        .collect();
    for r in &order[..count] {
        if let Some(mask) = masks[r.layer].as_mut() {
            mask.set(r.index, false);
        }
    }
    for (idx, mask) in masks.into_iter().enumerate() {
        if mask.is_some() {
            out.layer_mut(idx)?.set_mask(mask)?;
        }
    }
    let stats = PruneStats::of(&out);
    Ok((out, stats))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    /// Grid rate that was applied.
    pub rate: f64,
    pub stats: PruneStats,
    pub baseline_accuracy: f64,
    pub pruned_accuracy: f64,
    /// `(rate, accuracy)` for every probed rate, ending at the first
    /// violation if there was one.
    pub curve: Vec<(f64, f64)>,
}

/// Probes rates `step, 2·step, …` below 1 and returns the last rate before
/// the first accuracy drop beyond `threshold`, with its accuracy. Rate 0
/// (with the baseline accuracy) is returned when the first step already
/// violates.
pub fn rate_scan(
    step: f64,
    baseline: f64,
    threshold: f64,
    mut probe: impl FnMut(f64) -> Result<f64>,
) -> Result<(f64, f64, Vec<(f64, f64)>)> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::RateOutOfRange(step));
    }
    let mut best = (0.0, baseline);
    let mut curve = Vec::new();
    let mut k = 1u32;
    loop {
        let rate = f64::from(k) * step;
        if rate >= 1.0 - 1e-9 {
            break;
        }
        let acc = probe(rate)?;
        curve.push((rate, acc));
        if !within_threshold(acc, baseline, threshold) {
            break;
        }
        best = (rate, acc);
        k += 1;
    }
    Ok((best.0, best.1, curve))
}

/// Stepped search from the original weights each time. Returns the pruned
/// model at the selected rate and the outcome.
pub fn prune_search(model: &Model, eval: &Split, threshold: f64, step: f64) -> Result<(Model, PruneOutcome)> {
    let baseline = evaluate(model, eval)?;
    let (rate, acc, curve) = rate_scan(step, baseline, threshold, |rate| {
        let (pruned, _) = apply_prune(model, rate)?;
        evaluate(&pruned, eval)
    })?;
    let (pruned, stats) = apply_prune(model, rate)?;
    Ok((
        pruned,
        PruneOutcome {
            rate,
            stats,
            baseline_accuracy: baseline,
            pruned_accuracy: acc,
            curve,
        },
    ))
}

/// Ordinary training; the optimizer re-applies the prune masks after every
/// step.
pub fn retrain_pruned(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<TrainSummary> {
    Trainer::new(cfg.clone())?.train(model, dataset, observer)
}

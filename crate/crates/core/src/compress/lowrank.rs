//! Truncated-SVD factorization of dense layers with a per-layer rank search
//! and a repair loop that raises ranks when the assembled model loses too
//! much accuracy.

use alloc::collections::btree_map::Entry;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec::Vec;
use core::fmt;

use super::within_threshold;
use crate::model::{evaluate, Dataset, EpochObserver, Layer, LayerWeights, Model, Split, TrainConfig, TrainSummary, Trainer};
use crate::numerics::{svd, truncate, FactorPair, Matrix, SvdResult};
use crate::{Error, Result};

/// Below this many singular values the rank search scans every rank.
pub const EXHAUSTIVE_MAX_RANK: usize = 8;

pub fn factorize_layer(w: &Matrix, r: usize) -> Result<FactorPair> {
    truncate(&svd(w)?, r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankSearch {
    /// Exhaustive up to [`EXHAUSTIVE_MAX_RANK`], binary above.
    #[default]
    Auto,
    Binary,
    Exhaustive,
}

/// Smallest rank in `1..=full` accepted by `ok`.
///
/// The binary strategy assumes acceptance is monotone in the rank; the rank
/// it returns has still been checked directly unless it is `full`, which is
/// accepted without a probe.
pub fn search_rank(full: usize, strategy: RankSearch, mut ok: impl FnMut(usize) -> Result<bool>) -> Result<usize> {
    if full == 0 {
        return Err(Error::RankOutOfRange { rank: 0, max: 0 });
    }
    let exhaustive = match strategy {
        RankSearch::Exhaustive => true,
        RankSearch::Binary => false,
        RankSearch::Auto => full <= EXHAUSTIVE_MAX_RANK,
    };
    if exhaustive {
        for r in 1..full {
            if ok(r)? {
                return Ok(r);
            }
        }
        return Ok(full);
    }
    let (mut lo, mut hi) = (1, full);
    while lo < hi {
        let mid = lo + (hi - lo) / 2;
        if ok(mid)? {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    Ok(hi)
}

/// SVDs of dense layers, computed once per layer.
#[derive(Debug, Default, Clone)]
pub struct SvdCache {
    by_layer: BTreeMap<usize, SvdResult>,
}

impl SvdCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, model: &Model, layer: usize) -> Result<&SvdResult> {
        Ok(match self.by_layer.entry(layer) {
            Entry::Occupied(e) => e.into_mut(),
            Entry::Vacant(e) => e.insert(svd(dense_weights(model, layer)?)?),
        })
    }
}

fn dense_weights(model: &Model, layer: usize) -> Result<&Matrix> {
    match model.layer(layer)?.weights() {
        LayerWeights::Dense(w) => Ok(w),
        _ => Err(Error::NotDense { layer }),
    }
}

fn factorized_copy(model: &Model, layer: usize, factor: FactorPair) -> Result<Model> {
    let src = model.layer(layer)?;
    let replacement = Layer::factorized(factor, src.bias().to_vec(), src.activation())?;
    let mut out = model.clone();
    out.replace_layer(layer, replacement)?;
    Ok(out)
}

/// Smallest rank for layer `layer` whose factorization, with every other
/// layer left dense, keeps accuracy on `eval` within `threshold` of
/// `baseline`.
pub fn layer_rank_search(
    model: &Model,
    layer: usize,
    eval: &Split,
    baseline: f64,
    threshold: f64,
    strategy: RankSearch,
    cache: &mut SvdCache,
) -> Result<usize> {
    let decomposition = cache.get(model, layer)?.clone();
    search_rank(decomposition.len(), strategy, |r| {
        let probe = factorized_copy(model, layer, truncate(&decomposition, r)?)?;
        Ok(within_threshold(evaluate(&probe, eval)?, baseline, threshold))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry {
    pub layer: usize,
    pub rank: usize,
    /// Weight matrix shape m×n.
    pub rows: usize,
    pub cols: usize,
}

impl PlanEntry {
    pub fn full_rank(&self) -> usize {
        self.rows.min(self.cols)
    }

    pub fn params_before(&self) -> usize {
        self.rows * self.cols
    }

    pub fn params_after(&self) -> usize {
        self.rank * (self.rows + self.cols)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

/// Ranks chosen for a subset of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct RankPlan {
    entries: Vec<PlanEntry>,
    /// Weight-matrix sizes of every layer not in the plan.
    unplanned_params: usize,
    overall_compression: f64,
}

impl RankPlan {
    /// Validates `entries` against `model` (dense layers only, each at most
    /// once, ranks within `1..=min(m, n)`) and computes the compression.
    pub fn new(model: &Model, mut entries: Vec<PlanEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.layer);
        for pair in entries.windows(2) {
            if pair[0].layer == pair[1].layer {
                return Err(Error::InvalidConfig(format!("layer {} planned twice", pair[0].layer)));
            }
        }
        for e in &mut entries {
            let w = dense_weights(model, e.layer)?;
            (e.rows, e.cols) = w.shape();
            if e.rank == 0 || e.rank > e.full_rank() {
                return Err(Error::RankOutOfRange {
                    rank: e.rank,
                    max: e.full_rank(),
                });
            }
        }
        let unplanned_params = model
            .layers()
            .iter()
            .enumerate()
            .filter(|(i, _)| entries.binary_search_by_key(i, |e| e.layer).is_err())
            .map(|(_, l)| {
                let (m, n) = l.matrix_dims();
                m * n
            })
            .sum();
        Ok(Self::from_parts(entries, unplanned_params))
    }

    /// Plan arithmetic without a model: `unplanned_params` is the summed
    /// m·n of every layer left dense.
    pub fn from_parts(entries: Vec<PlanEntry>, unplanned_params: usize) -> Self {
        let before: usize = entries.iter().map(PlanEntry::params_before).sum::<usize>() + unplanned_params;
        let after: usize = entries.iter().map(PlanEntry::params_after).sum::<usize>() + unplanned_params;
        let overall_compression = if before == 0 {
            0.0
        } else {
            1.0 - after as f64 / before as f64
        };
        Self {
            entries,
            unplanned_params,
            overall_compression,
        }
    }

    pub fn empty(model: &Model) -> Self {
        Self::new(model, Vec::new()).expect("empty plan is always valid")
    }

    pub fn entries(&self) -> &[PlanEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `1 − (Σ_planned r(m+n) + Σ_other mn) / Σ_all mn`.
    pub fn overall_compression(&self) -> f64 {
        self.overall_compression
    }

    pub fn rank_stats(&self) -> Option<RankStats> {
        let ranks = self.entries.iter().map(|e| e.rank);
        let min = ranks.clone().min()?;
        let max = ranks.clone().max()?;
        let mean = ranks.sum::<usize>() as f64 / self.entries.len() as f64;
        Some(RankStats { min, max, mean })
    }

    fn with_rank(&self, layer: usize, rank: usize) -> Self {
        let mut entries = self.entries.clone();
        if let Some(e) = entries.iter_mut().find(|e| e.layer == layer) {
            e.rank = rank;
        }
        Self::from_parts(entries, self.unplanned_params)
    }

    /// Drops `layer` from the plan so it stays dense.
    fn without(&self, layer: usize) -> Self {
        let mut entries = self.entries.clone();
        let mut unplanned = self.unplanned_params;
        if let Some(pos) = entries.iter().position(|e| e.layer == layer) {
            unplanned += entries.remove(pos).params_before();
        }
        Self::from_parts(entries, unplanned)
    }
}

impl fmt::Display for RankPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "layer\trows\tcols\trank\tparams_before\tparams_after")?;
        for e in &self.entries {
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}\t{}",
                e.layer,
                e.rows,
                e.cols,
                e.rank,
                e.params_before(),
                e.params_after()
            )?;
        }
        writeln!(f, "overall_compression\t{:.6}", self.overall_compression)?;
        if let Some(s) = self.rank_stats() {
            writeln!(f, "rank_min\t{}\nrank_max\t{}\nrank_mean\t{:.2}", s.min, s.max, s.mean)?;
        }
        Ok(())
    }
}

/// Rank search over every dense layer. Layers whose selected rank would not
/// reduce their parameter count stay dense.
pub fn plan_ranks(
    model: &Model,
    eval: &Split,
    threshold: f64,
    strategy: RankSearch,
    cache: &mut SvdCache,
) -> Result<RankPlan> {
    let baseline = evaluate(model, eval)?;
    let mut entries = Vec::new();
    for (idx, layer) in model.layers().iter().enumerate() {
        if !matches!(layer.weights(), LayerWeights::Dense(_)) {
            continue;
        }
        let rank = layer_rank_search(model, idx, eval, baseline, threshold, strategy, cache)?;
        let (rows, cols) = layer.matrix_dims();
        let entry = PlanEntry { layer: idx, rank, rows, cols };
        if entry.params_after() < entry.params_before() {
            entries.push(entry);
        }
    }
    RankPlan::new(model, entries)
}

/// Replaces every planned layer with its rank-r factors.
pub fn assemble_factorized(model: &Model, plan: &RankPlan) -> Result<Model> {
    assemble_with_cache(model, plan, &mut SvdCache::new())
}

pub fn assemble_with_cache(model: &Model, plan: &RankPlan, cache: &mut SvdCache) -> Result<Model> {
    let mut out = model.clone();
    for e in plan.entries() {
        let factor = truncate(cache.get(model, e.layer)?, e.rank)?;
        let src = model.layer(e.layer)?;
        let layer = Layer::factorized(factor, src.bias().to_vec(), src.activation())?;
        out.replace_layer(e.layer, layer)?;
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AdjustOutcome {
    pub plan: RankPlan,
    pub model: Model,
    pub accuracy: f64,
    pub threshold_met: bool,
    pub iterations: usize,
}

/// While the assembled model misses `baseline − threshold` and iterations
/// remain, raises the rank of the planned layer with the smallest
/// `r / min(m, n)` (lowest layer index on ties) by 25%, rounding up and
/// capping at full rank. A layer whose raised rank would no longer save
/// parameters leaves the plan and stays dense.
pub fn dynamic_rank_adjust(
    model: &Model,
    plan: &RankPlan,
    eval: &Split,
    baseline: f64,
    threshold: f64,
    max_iters: usize,
    cache: &mut SvdCache,
) -> Result<AdjustOutcome> {
    let mut plan = plan.clone();
    let mut iterations = 0;
    loop {
        let assembled = assemble_with_cache(model, &plan, cache)?;
        let accuracy = evaluate(&assembled, eval)?;
        let met = within_threshold(accuracy, baseline, threshold);
        let candidate = plan
            .entries()
            .iter()
            .filter(|e| e.rank < e.full_rank())
            .min_by(|a, b| {
                (a.rank * b.full_rank())
                    .cmp(&(b.rank * a.full_rank()))
                    .then(a.layer.cmp(&b.layer))
            })
            .copied();
        let next = match candidate {
            Some(e) if !met && iterations < max_iters => e,
            _ => {
                return Ok(AdjustOutcome {
                    plan,
                    model: assembled,
                    accuracy,
                    threshold_met: met,
                    iterations,
                })
            }
        };
        let raised = PlanEntry {
            rank: (next.rank + next.rank.div_ceil(4)).min(next.full_rank()),
            ..next
        };
        plan = if raised.params_after() < raised.params_before() {
            plan.with_rank(next.layer, raised.rank)
        } else {
            plan.without(next.layer)
        };
        iterations += 1;
    }
}

/// Trains factor matrices and remaining dense layers end to end.
pub fn retrain_factorized(
    model: &mut Model,
    dataset: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<TrainSummary> {
    Trainer::new(cfg.clone())?.train(model, dataset, observer)
}

//! Steganographic capacity: how many low-order bits of every 32-bit weight
//! can be zeroed before accuracy drops past a threshold, and the packed
//! storage that drops those bits.

use alloc::vec;
use alloc::vec::Vec;

use super::within_threshold;
use crate::model::{evaluate, Dataset, EpochObserver, Model, Split, TrainConfig, TrainSummary, Trainer};
use crate::{Error, Result};

/// Clears the `n` least-significant bits of the IEEE-754 pattern of `w`.
/// `n == 32` yields `+0.0`.
pub fn overwrite_bits(w: f32, n: u32) -> Result<f32> {
    if n > 32 {
        return Err(Error::BitCountOutOfRange(n));
    }
    Ok(clear_low_bits(w, n))
}

#[inline]
pub(crate) fn clear_low_bits(w: f32, n: u32) -> f32 {
    let mask = u32::MAX.checked_shl(n).unwrap_or(0);
    f32::from_bits(w.to_bits() & mask)
}

/// `n / 32`.
pub fn compression_rate(n: u32) -> f64 {
    f64::from(n) / 32.0
}

/// Copy of `model` with every weight, factor entry and bias passed through
/// [`overwrite_bits`]. Prune masks are left as they are.
pub fn apply_bitmask(model: &Model, n: u32) -> Result<Model> {
    if n > 32 {
        return Err(Error::BitCountOutOfRange(n));
    }
    let mut out = model.clone();
    out.for_each_param_mut(|w| *w = clear_low_bits(*w, n));
    Ok(out)
}

/// True when every parameter already has its lowest `n` bits clear.
pub fn is_bitmasked(model: &Model, n: u32) -> bool {
    let clean = |w: &f32| clear_low_bits(*w, n).to_bits() == w.to_bits();
    model.layers().iter().all(|layer| {
        layer.tensors().iter().all(|t| t.iter().all(clean)) && layer.bias().iter().all(clean)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StegoOutcome {
    pub capacity_bits: u32,
    pub compression_rate: f64,
    pub baseline_accuracy: f64,
    pub compressed_accuracy: f64,
    /// `(bits, accuracy)` for bits 0..=32; entry 0 is the baseline.
    pub accuracy_curve: Vec<(u32, f64)>,
}

impl StegoOutcome {
    pub fn accuracy_at(&self, bits: u32) -> Option<f64> {
        self.accuracy_curve
            .iter()
            .find(|(b, _)| *b == bits)
            .map(|&(_, a)| a)
    }
}

/// Scans bit counts 1..=32 with `probe(n)` giving the accuracy after
/// clearing `n` bits. The capacity is the last `n` before the first one
/// whose accuracy falls more than `threshold` below `baseline`. Every bit
/// count is probed so the curve is complete.
pub fn capacity_scan(
    baseline: f64,
    threshold: f64,
    mut probe: impl FnMut(u32) -> Result<f64>,
) -> Result<StegoOutcome> {
    let mut curve = vec![(0u32, baseline)];
    let mut capacity = 0u32;
    let mut violated = false;
    for n in 1..=32u32 {
        let acc = probe(n)?;
        curve.push((n, acc));
        if !violated {
            if within_threshold(acc, baseline, threshold) {
                capacity = n;
            } else {
                violated = true;
            }
        }
    }
    Ok(StegoOutcome {
        capacity_bits: capacity,
        compression_rate: compression_rate(capacity),
        baseline_accuracy: baseline,
        compressed_accuracy: curve[capacity as usize].1,
        accuracy_curve: curve,
    })
}

/// Baseline accuracy on `eval`, then [`capacity_scan`] over fresh masked
/// copies of `model`.
pub fn capacity_search(model: &Model, eval: &Split, threshold: f64) -> Result<StegoOutcome> {
    let baseline = evaluate(model, eval)?;
    capacity_scan(baseline, threshold, |n| evaluate(&apply_bitmask(model, n)?, eval))
}

/// Bytes needed to store `count` values with `n` bits dropped from each.
pub fn packed_len(count: usize, n: u32) -> usize {
    (count * (32 - n as usize)).div_ceil(8)
}

/// Packs the upper `32 - n` bits of each value into a little-endian,
/// least-significant-bit-first stream of [`packed_len`] bytes.
pub fn pack_upper_bits(values: &[f32], n: u32) -> Result<Vec<u8>> {
    if n > 32 {
        return Err(Error::BitCountOutOfRange(n));
    }
    let width = 32 - n;
    let mut out = Vec::with_capacity(packed_len(values.len(), n));
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    for &v in values {
        if width == 0 {
            break;
        }
        let payload = u64::from(v.to_bits() >> n);
        acc |= payload << filled;
        filled += width;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(out)
}

/// Inverse of [`pack_upper_bits`]; the dropped bits come back as zeros.
pub fn unpack_upper_bits(bytes: &[u8], count: usize, n: u32) -> Result<Vec<f32>> {
    if n > 32 {
        return Err(Error::BitCountOutOfRange(n));
    }
    let expected = packed_len(count, n);
    if bytes.len() != expected {
        return Err(Error::DataLength {
            expected,
            actual: bytes.len(),
        });
    }
    let width = 32 - n;
    if width == 0 {
        return Ok(vec![0.0; count]);
    }
    let value_mask = if width == 32 { u64::from(u32::MAX) } else { (1u64 << width) - 1 };
    let mut out = Vec::with_capacity(count);
    let mut acc: u64 = 0;
    let mut filled = 0u32;
    let mut iter = bytes.iter();
    for _ in 0..count {
        while filled < width {
            let b = *iter.next().expect("length checked above");
            acc |= u64::from(b) << filled;
            filled += 8;
        }
        let payload = (acc & value_mask) as u32;
        acc >>= width;
        filled -= width;
        out.push(f32::from_bits(payload << n));
    }
    Ok(out)
}

/// Retrains a model whose parameters are already masked at `n` bits,
/// re-clearing those bits after every optimizer step.
pub fn retrain_quantized(
    model: &mut Model,
    n: u32,
    dataset: &Dataset,
    cfg: &TrainConfig,
    observer: &mut dyn EpochObserver,
) -> Result<TrainSummary> {
    if !is_bitmasked(model, n) {
        return Err(Error::InvalidModel(alloc::format!(
            "model parameters are not masked at {n} bits"
        )));
    }
    Trainer::new(cfg.clone())?
        .with_cleared_bits(n)?
        .train(model, dataset, observer)
}

//! Compression procedures and the threshold scans that pick their strength.

pub mod lowrank;
pub mod prune;
pub mod stego;

/// Accuracy comparisons tolerate this much floating-point slack.
pub(crate) const ACCURACY_EPS: f64 = 1e-12;

/// True when `accuracy` has not fallen more than `threshold` below `baseline`.
pub(crate) fn within_threshold(accuracy: f64, baseline: f64, threshold: f64) -> bool {
    accuracy + ACCURACY_EPS >= baseline - threshold
}

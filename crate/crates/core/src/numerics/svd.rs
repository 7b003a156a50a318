//! One-sided (Hestenes) Jacobi SVD and rank truncation.

use alloc::vec;
use alloc::vec::Vec;

use super::Matrix;
use crate::{Error, Result};

const MAX_SWEEPS: usize = 60;
const ORTHOGONALITY_TOL: f64 = 1e-10;

/// Thin SVD `a = u · diag(sigma) · vᵀ` with `k = min(m, n)` components.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// m×k, orthonormal columns.
    pub u: Matrix,
    /// Non-negative, non-increasing.
    pub sigma: Vec<f32>,
    /// n×k, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    /// Number of singular triplets.
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// `u · diag(sigma) · vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        truncate(self, self.len())
            .expect("full rank is always a valid truncation")
            .product()
    }
}

/// Rank-r factors of a matrix with the singular values folded into the left
/// factor, so `u_fold · v_t` approximates the original m×n matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorPair {
    u_fold: Matrix,
    v_t: Matrix,
}

impl FactorPair {
    pub fn new(u_fold: Matrix, v_t: Matrix) -> Result<Self> {
        if u_fold.cols() != v_t.rows() {
            return Err(Error::ShapeMismatch {
                op: "factor pair",
                left: u_fold.shape(),
                right: v_t.shape(),
            });
        }
        let rank = u_fold.cols();
        let max = u_fold.rows().min(v_t.cols());
        if rank > max {
            return Err(Error::RankOutOfRange { rank, max });
        }
        Ok(Self { u_fold, v_t })
    }

    pub fn u_fold(&self) -> &Matrix {
        &self.u_fold
    }

    pub fn v_t(&self) -> &Matrix {
        &self.v_t
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Matrix, &mut Matrix) {
        (&mut self.u_fold, &mut self.v_t)
    }

    pub fn rank(&self) -> usize {
        self.u_fold.cols()
    }

    /// Shape (m, n) of the approximated matrix.
    pub fn dims(&self) -> (usize, usize) {
        (self.u_fold.rows(), self.v_t.cols())
    }

    /// `r·(m+n)`.
    pub fn param_count(&self) -> usize {
        self.u_fold.len() + self.v_t.len()
    }

    /// Materializes `u_fold · v_t`.
    pub fn product(&self) -> Matrix {
        super::matmul(&self.u_fold, &self.v_t).expect("factor shapes are validated on construction")
    }
}

/// Singular value decomposition by one-sided Jacobi rotations.
///
/// Works on the taller orientation of `a` in `f64`; columns are rotated
/// pairwise until every pair is orthogonal to `1e-10` (relative) or 60
/// sweeps have run. Left vectors belonging to zero singular values are
/// completed to an orthonormal set. Equal singular values keep the order of
/// the columns they came from.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::NonFinite);
    }
    let transposed = a.rows() < a.cols();
    let (m, n) = if transposed {
        (a.cols(), a.rows())
    } else {
        (a.rows(), a.cols())
    };

    // Column-major working copy of the tall orientation.
    let mut work = vec![0.0f64; m * n];
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            let v = f64::from(a.get(r, c));
            if transposed {
                work[r * m + c] = v;
            } else {
                work[c * m + r] = v;
            }
        }
    }
    let mut right = vec![0.0f64; n * n];
    for i in 0..n {
        right[i * n + i] = 1.0;
    }

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let cp = &work[p * m..(p + 1) * m];
                    let cq = &work[q * m..(q + 1) * m];
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        alpha += x * x;
                        beta += y * y;
                        gamma += x * y;
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || libm::fabs(gamma) <= ORTHOGONALITY_TOL * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = libm::copysign(1.0, zeta) / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate_columns(&mut work, m, p, q, c, s);
                rotate_columns(&mut right, n, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = (0..n)
        .map(|j| libm::sqrt(work[j * m..(j + 1) * m].iter().map(|v| v * v).sum::<f64>()))
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable: ties keep column order.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let sigma_max = norms[order[0]];
    let zero_tol = sigma_max * (m as f64) * f64::EPSILON;

    let mut left_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut right_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        let s = norms[j];
        right_cols.push(right[j * n..(j + 1) * n].to_vec());
        if s > zero_tol && s > 0.0 {
            left_cols.push(work[j * m..(j + 1) * m].iter().map(|v| v / s).collect());
            sigma.push(s);
        } else {
            left_cols.push(Vec::new());
            sigma.push(0.0);
            deficient.push(slot);
        }
    }
    complete_basis(&mut left_cols, &deficient, m);

    let k = n;
    let mut left = Matrix::zeros(m, k);
    let mut rightm = Matrix::zeros(n, k);
    for j in 0..k {
        for i in 0..m {
            left.set(i, j, left_cols[j][i] as f32);
        }
        for i in 0..n {
            rightm.set(i, j, right_cols[j][i] as f32);
        }
    }
    let sigma = sigma.into_iter().map(|s| s as f32).collect();
    Ok(if transposed {
        SvdResult {
            u: rightm,
            sigma,
            v: left,
        }
    } else {
        SvdResult {
            u: left,
            sigma,
            v: rightm,
        }
    })
}

fn rotate_columns(buf: &mut [f64], len: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = buf.split_at_mut(q * len);
    let cp = &mut head[p * len..(p + 1) * len];
    let cq = &mut tail[..len];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// Fills the columns listed in `missing` with unit vectors orthogonal to
/// every other column, drawn from the standard basis.
fn complete_basis(cols: &mut [Vec<f64>], missing: &[usize], m: usize) {
    for &slot in missing {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..m {
            let mut cand = vec![0.0f64; m];
            cand[e] = 1.0;
            // Two Gram-Schmidt passes.
            for _ in 0..2 {
                for (j, col) in cols.iter().enumerate() {
                    if j == slot || col.is_empty() {
                        continue;
                    }
                    let dot: f64 = col.iter().zip(&cand).map(|(a, b)| a * b).sum();
                    for (c, a) in cand.iter_mut().zip(col) {
                        *c -= dot * a;
                    }
                }
            }
            let norm = libm::sqrt(cand.iter().map(|v| v * v).sum::<f64>());
            let better = best.as_ref().is_none_or(|(b, _)| norm > *b);
            if better {
                best = Some((norm, cand));
            }
            if norm > 0.5 {
                break;
            }
        }
        let (norm, mut cand) = best.expect("m >= 1");
        cand.iter_mut().for_each(|v| *v /= norm);
        cols[slot] = cand;
    }
}

/// Keeps the leading `r` singular triplets and folds `sigma` into the left
/// factor.
pub fn truncate(svd: &SvdResult, r: usize) -> Result<FactorPair> {
    let k = svd.len();
    if r == 0 || r > k {
        return Err(Error::RankOutOfRange { rank: r, max: k });
    }
    let m = svd.u.rows();
    let n = svd.v.rows();
    let mut u_fold = Matrix::zeros(m, r);
    for i in 0..m {
        for j in 0..r {
            u_fold.set(i, j, svd.u.get(i, j) * svd.sigma[j]);
        }
    }
    let mut v_t = Matrix::zeros(r, n);
    for j in 0..r {
        for i in 0..n {
            v_t.set(j, i, svd.v.get(i, j));
        }
    }
    FactorPair::new(u_fold, v_t)
}

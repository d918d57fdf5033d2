//! Least squares by Householder QR with column-norm pivoting.
//!
//! nalgebra's `ColPivQR` pivots on the largest single entry rather than the
//! largest remaining column norm, which is not rank revealing, so the
//! factorisation is done here.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Relative pivot threshold below which a column counts as collinear.
pub const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSystemResult {
    /// One entry per input column; dropped columns carry 0.
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
    pub rank: usize,
    /// Input column indices removed for collinearity, ascending.
    pub dropped: Vec<usize>,
    /// Retained column indices, ascending.
    pub retained: Vec<usize>,
    /// `(X_r' X_r)^{-1}` over the retained columns, in `retained` order.
    pub xtx_inv: DMatrix<f64>,
}

impl LinearSystemResult {
    pub fn fitted(&self, y: &DVector<f64>) -> DVector<f64> {
        y - &self.residuals
    }
}

struct PivotedQr {
    /// Columns after the Householder sweep (R in the upper part).
    cols: Vec<Vec<f64>>,
    perm: Vec<usize>,
    rank: usize,
    /// Householder vectors and their scale, one per eliminated column.
    reflectors: Vec<(Vec<f64>, f64)>,
}

fn pivoted_qr(x: &DMatrix<f64>) -> PivotedQr {
    let (n, p) = x.shape();
    let mut cols: Vec<Vec<f64>> = (0..p).map(|j| x.column(j).iter().copied().collect()).collect();
    let mut perm: Vec<usize> = (0..p).collect();
    let scale = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0_f64, f64::max);
    let mut reflectors = Vec::new();
    let mut rank = 0;
    for k in 0..p.min(n) {
        let mut best = k;
        let mut best_norm = -1.0;
        for (j, c) in cols.iter().enumerate().skip(k) {
            let nrm: f64 = c[k..].iter().map(|v| v * v).sum();
            if nrm > best_norm {
                best_norm = nrm;
                best = j;
            }
        }
        let best_norm = best_norm.sqrt();
        if scale == 0.0 || best_norm <= RANK_TOL * scale {
            break;
        }
        cols.swap(k, best);
        perm.swap(k, best);
        // Householder vector v with v[0] = 1 implicit scaling.
        let alpha = if cols[k][k] >= 0.0 { -best_norm } else { best_norm };
        let mut v: Vec<f64> = cols[k][k..].to_vec();
        v[0] -= alpha;
        let vnorm2: f64 = v.iter().map(|a| a * a).sum();
        let beta = if vnorm2 > 0.0 { 2.0 / vnorm2 } else { 0.0 };
        cols[k][k] = alpha;
        for e in cols[k][k + 1..].iter_mut() {
            *e = 0.0;
        }
        for c in cols.iter_mut().skip(k + 1) {
            let dot: f64 = v.iter().zip(&c[k..]).map(|(a, b)| a * b).sum();
            let f = beta * dot;
            for (ci, vi) in c[k..].iter_mut().zip(&v) {
                *ci -= f * vi;
            }
        }
        reflectors.push((v, beta));
        rank += 1;
    }
    PivotedQr { cols, perm, rank, reflectors }
}

fn apply_qt(qr: &PivotedQr, y: &mut [f64]) {
    for (k, (v, beta)) in qr.reflectors.iter().enumerate() {
        let dot: f64 = v.iter().zip(&y[k..]).map(|(a, b)| a * b).sum();
        let f = beta * dot;
        for (yi, vi) in y[k..].iter_mut().zip(v) {
            *yi -= f * vi;
        }
    }
}

/// Inverse of the leading `r x r` upper-triangular block.
fn r_inverse(qr: &PivotedQr) -> DMatrix<f64> {
    let r = qr.rank;
    let mut inv = DMatrix::zeros(r, r);
    for j in 0..r {
        // Solve R x = e_j by back substitution.
        for i in (0..=j).rev() {
            let mut s = if i == j { 1.0 } else { 0.0 };
            for m in i + 1..=j {
                s -= qr.cols[m][i] * inv[(m, j)];
            }
            inv[(i, j)] = s / qr.cols[i][i];
        }
    }
    inv
}

/// Least-squares fit of `y` on the columns of `x`.
///
/// Collinear columns are removed in pivot order (smallest remaining norm
/// last) and reported in `dropped`; the returned solution is the basic
/// solution on the retained columns.
pub fn least_squares(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<LinearSystemResult> {
    let (n, p) = x.shape();
    if n == 0 || p == 0 {
        return Err(Error::EmptyDesign);
    }
    if y.len() != n {
        return Err(Error::InvalidInput(format!("design has {n} rows but outcome has {}", y.len())));
    }
    let qr = pivoted_qr(x);
    let r = qr.rank;
    let mut qty: Vec<f64> = y.iter().copied().collect();
    apply_qt(&qr, &mut qty);
    let mut b_perm = vec![0.0; r];
    for i in (0..r).rev() {
        let mut s = qty[i];
        for (m, bm) in b_perm.iter().enumerate().skip(i + 1) {
            s -= qr.cols[m][i] * bm;
        }
        b_perm[i] = s / qr.cols[i][i];
    }
    let mut coefficients = DVector::zeros(p);
    for (pos, &b) in b_perm.iter().enumerate() {
        coefficients[qr.perm[pos]] = b;
    }
    let residuals = y - x * &coefficients;
    let mut retained: Vec<usize> = qr.perm[..r].to_vec();
    retained.sort_unstable();
    let mut dropped: Vec<usize> = qr.perm[r..].to_vec();
    dropped.sort_unstable();

    // (X_r'X_r)^{-1} = P R^{-1} R^{-T} P' mapped into ascending retained order.
    let rinv = r_inverse(&qr);
    let inner = &rinv * rinv.transpose();
    let slot: Vec<usize> = (0..r).map(|pos| retained.binary_search(&qr.perm[pos]).unwrap()).collect();
    let mut xtx_inv = DMatrix::zeros(r, r);
    for a in 0..r {
        for b in 0..r {
            xtx_inv[(slot[a], slot[b])] = inner[(a, b)];
        }
    }
    Ok(LinearSystemResult { coefficients, residuals, rank: r, dropped, retained, xtx_inv })
}

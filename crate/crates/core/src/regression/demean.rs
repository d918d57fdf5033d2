//! Two-way (unit and period) demeaning by alternating projections.

use crate::error::{Error, Result};

pub const DEMEAN_TOL: f64 = 1e-12;
pub const DEMEAN_MAX_ITER: usize = 10_000;

/// Applies the two-way fixed-effects annihilator `M_X` to a row-major
/// `n x t` array on the cells where `mask` is true.
///
/// Unit means and period means are swept out alternately until the largest
/// adjustment in a sweep falls below `tol` (scaled by the data magnitude when
/// that exceeds one). The sweep runs two decades past that point so the
/// accumulated remainder, not just the last step, is below `tol`. Cells
/// outside the mask come back as zero.
pub fn twoway_demean(values: &[f64], mask: &[bool], n: usize, t: usize, tol: f64) -> Result<Vec<f64>> {
    if values.len() != n * t || mask.len() != n * t {
        return Err(Error::InvalidInput("demean: array shape mismatch".into()));
    }
    let mut row_cnt = vec![0usize; n];
    let mut col_cnt = vec![0usize; t];
    for i in 0..n {
        for s in 0..t {
            if mask[i * t + s] {
                row_cnt[i] += 1;
                col_cnt[s] += 1;
            }
        }
    }
    if let Some(i) = row_cnt.iter().position(|&c| c == 0) {
        return Err(Error::InvalidInput(format!("demean: mask row {i} is empty")));
    }
    if let Some(s) = col_cnt.iter().position(|&c| c == 0) {
        return Err(Error::InvalidInput(format!("demean: mask column {s} is empty")));
    }
    let mut r: Vec<f64> = values.iter().zip(mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
    let scale = r.iter().fold(0.0_f64, |a, v| a.max(v.abs())).max(1.0);
    let mut col_sum = vec![0.0; t];
    for _ in 0..DEMEAN_MAX_ITER {
        let mut change: f64 = 0.0;
        for i in 0..n {
            let row = &mut r[i * t..(i + 1) * t];
            let m = &mask[i * t..(i + 1) * t];
            let mean = row.iter().zip(m).filter(|(_, &k)| k).map(|(v, _)| v).sum::<f64>() / row_cnt[i] as f64;
            for (v, &k) in row.iter_mut().zip(m) {
                if k {
                    *v -= mean;
                }
            }
            change = change.max(mean.abs());
        }
        col_sum.iter_mut().for_each(|c| *c = 0.0);
        for i in 0..n {
            for s in 0..t {
                if mask[i * t + s] {
                    col_sum[s] += r[i * t + s];
                }
            }
        }
        for s in 0..t {
            col_sum[s] /= col_cnt[s] as f64;
            change = change.max(col_sum[s].abs());
        }
        for i in 0..n {
            for s in 0..t {
                if mask[i * t + s] {
                    r[i * t + s] -= col_sum[s];
                }
            }
        }
        if change < 1e-2 * tol * scale {
            return Ok(r);
        }
    }
    Err(Error::NoConvergence { what: "two-way demeaning".into(), iterations: DEMEAN_MAX_ITER })
}

//! Design-risk indices read off the implicit weights, and their association
//! with realised TWFE distortion across replications.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::{EventWindow, Panel};
use crate::regression::least_squares;
use crate::twfe::{residualise, WeightDecomposition};

/// Risk indices for one target horizon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RiskRow {
    pub k: i64,
    /// Negative-weight mass.
    pub n: f64,
    /// Cross-horizon mass.
    pub c: f64,
    /// Absolute mass.
    pub a: f64,
    /// Signed mass.
    pub s: f64,
    pub identified: bool,
}

pub fn risk_indices(w: &WeightDecomposition) -> RiskRow {
    let (mut n, mut c, mut a, mut s) = (0.0, 0.0, 0.0, 0.0);
    for (&(_, kp), &v) in &w.window {
        a += v.abs();
        s += v;
        if v < 0.0 {
            n += v.abs();
        }
        if kp != w.target {
            c += v.abs();
        }
    }
    RiskRow { k: w.target, n, c, a, s, identified: true }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub rows: Vec<RiskRow>,
}

impl DiagnosticsReport {
    pub fn row(&self, k: i64) -> Option<&RiskRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    /// `k,N,C,A,S,identified_flag`; unidentified horizons carry `NA`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["k", "N", "C", "A", "S", "identified_flag"])?;
        for r in &self.rows {
            let f = |v: f64| if r.identified { format!("{v:.12e}") } else { "NA".to_string() };
            w.write_record([r.k.to_string(), f(r.n), f(r.c), f(r.a), f(r.s), (r.identified as u8).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Risk indices for every regression column of the window. Horizons that
/// were dropped from the regression are listed with `identified = false`.
pub fn diagnose(panel: &Panel, window: &EventWindow) -> Result<DiagnosticsReport> {
    let rd = residualise(panel, window)?;
    let rows = window
        .columns()
        .into_iter()
        .map(|k| match rd.weights(k) {
            Ok(w) => risk_indices(&w),
            Err(_) => RiskRow { k, n: f64::NAN, c: f64::NAN, a: f64::NAN, s: f64::NAN, identified: false },
        })
        .collect();
    Ok(DiagnosticsReport { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Association {
    pub corr_n: f64,
    pub corr_c: f64,
    /// Set when a correlation was reported as 0 because a variance vanished.
    pub degenerate_n: bool,
    pub degenerate_c: bool,
    /// OLS of Dist on (1, N, C); a constant regressor is left out and its
    /// slope reported as `None`.
    pub intercept: f64,
    pub slope_n: Option<f64>,
    pub slope_c: Option<f64>,
    pub replications: usize,
}

fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    let scale = (sxx * syy).sqrt();
    if scale <= 1e-300 || sxx <= 1e-24 * (mx * mx).max(1.0) * n || syy <= 1e-24 * (my * my).max(1.0) * n {
        None
    } else {
        Some((sxy / scale).clamp(-1.0, 1.0))
    }
}

fn is_constant(v: &[f64]) -> bool {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let ss: f64 = v.iter().map(|x| (x - m) * (x - m)).sum();
    ss <= 1e-24 * (m * m).max(1.0) * v.len() as f64
}

/// Correlation of `(N(k), C(k))` with `Dist(k)` over replications
/// `(N, C, Dist)`. Triples with a non-finite entry are skipped.
pub fn distortion_association(reps: &[(f64, f64, f64)]) -> Result<Association> {
    let ok: Vec<&(f64, f64, f64)> = reps.iter().filter(|r| r.0.is_finite() && r.1.is_finite() && r.2.is_finite()).collect();
    if ok.len() < 3 {
        return Err(Error::TooFewReplications { got: ok.len() });
    }
    let n: Vec<f64> = ok.iter().map(|r| r.0).collect();
    let c: Vec<f64> = ok.iter().map(|r| r.1).collect();
    let d: Vec<f64> = ok.iter().map(|r| r.2).collect();
    let cn = pearson(&n, &d);
    let cc = pearson(&c, &d);
    let use_n = !is_constant(&n);
    let use_c = !is_constant(&c);
    let mut cols: Vec<&[f64]> = vec![];
    if use_n {
        cols.push(&n);
    }
    if use_c {
        cols.push(&c);
    }
    let m = ok.len();
    let x = DMatrix::from_fn(m, cols.len() + 1, |r, j| if j == 0 { 1.0 } else { cols[j - 1][r] });
    let fit = least_squares(&x, &DVector::from_vec(d))?;
    let mut next = 1;
    let mut take = |used: bool| {
        if used {
            next += 1;
            // A regressor collinear with the other one has no separate slope.
            fit.retained.contains(&(next - 1)).then(|| fit.coefficients[next - 1])
        } else {
            None
        }
    };
    let slope_n = take(use_n);
    let slope_c = take(use_c);
    Ok(Association {
        corr_n: cn.unwrap_or(0.0),
        corr_c: cc.unwrap_or(0.0),
        degenerate_n: cn.is_none(),
        degenerate_c: cc.is_none(),
        intercept: fit.coefficients[0],
        slope_n,
        slope_c,
        replications: m,
    })
}

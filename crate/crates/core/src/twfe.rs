//! Two-way fixed-effects event-study regression and its implicit weights.
//!
//! Every coefficient is a linear functional of the outcome, `β̂_k = π(k)·Y`,
//! with `π(k) = Z (Z'Z)^{-1} e_k` and `Z` the two-way-demeaned indicator
//! design. Summing `π(k)` over the cells of a cohort-horizon gives the
//! in-sample weight that cell receives.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::panel::{Cohort, EventWindow, Panel};
use crate::regression::{least_squares, twoway_demean, DEMEAN_TOL};

/// Relative-time indicator design over the observed cells of a panel.
#[derive(Debug, Clone, PartialEq)]
pub struct EventDesign {
    /// `k` for each column, ascending.
    pub columns: Vec<i64>,
    /// Stacked row -> `(unit, period)`, observed cells in row-major order.
    pub cells: Vec<(usize, u32)>,
    /// The single nonzero column of each stacked row, if any.
    pub column_of: Vec<Option<usize>>,
}

impl EventDesign {
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.cells.len(), self.columns.len());
        for (r, c) in self.column_of.iter().enumerate() {
            if let Some(c) = c {
                d[(r, *c)] = 1.0;
            }
        }
        d
    }

    /// Number of cells with a one in each column.
    pub fn support(&self) -> Vec<usize> {
        let mut s = vec![0; self.columns.len()];
        for c in self.column_of.iter().flatten() {
            s[*c] += 1;
        }
        s
    }
}

pub fn build_event_design(panel: &Panel, window: &EventWindow) -> Result<EventDesign> {
    let columns = window.columns();
    if columns.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let mut cells = Vec::new();
    let mut column_of = Vec::new();
    for i in 0..panel.n() {
        for t in 1..=panel.periods() {
            if !panel.observed(i, t) {
                continue;
            }
            cells.push((i, t));
            let col = panel
                .cohort(i)
                .adoption()
                .and_then(|g| columns.binary_search(&(t as i64 - g as i64)).ok());
            column_of.push(col);
        }
    }
    Ok(EventDesign { columns, cells, column_of })
}

/// The residualised design `Z = M_X D` and everything about the regression
/// that does not depend on the outcome.
#[derive(Debug, Clone)]
pub struct ResidualisedDesign {
    pub design: EventDesign,
    n: usize,
    periods: u32,
    cohorts: Vec<Cohort>,
    /// Retained relative times, ascending.
    pub retained: Vec<i64>,
    /// Window times with no supporting cell.
    pub not_identified: Vec<i64>,
    /// Window times with support but removed for collinearity.
    pub collinear: Vec<i64>,
    /// `cells x retained`.
    pub z: DMatrix<f64>,
    /// `(Z'Z)^{-1}` in `retained` order.
    pub ztz_inv: DMatrix<f64>,
}

pub fn residualise(panel: &Panel, window: &EventWindow) -> Result<ResidualisedDesign> {
    let design = build_event_design(panel, window)?;
    let (n, tl) = (panel.n(), panel.periods() as usize);
    let mask = panel.observed_mask();
    let support = design.support();
    let mut not_identified = Vec::new();
    let mut z_cols: Vec<(i64, Vec<f64>)> = Vec::new();
    for (j, &k) in design.columns.iter().enumerate() {
        if support[j] == 0 {
            not_identified.push(k);
            continue;
        }
        let mut full = vec![0.0; n * tl];
        for (r, &(i, t)) in design.cells.iter().enumerate() {
            if design.column_of[r] == Some(j) {
                full[i * tl + t as usize - 1] = 1.0;
            }
        }
        let dm = twoway_demean(&full, mask, n, tl, DEMEAN_TOL)?;
        let col: Vec<f64> = design.cells.iter().map(|&(i, t)| dm[i * tl + t as usize - 1]).collect();
        z_cols.push((k, col));
    }
    if z_cols.is_empty() {
        return Err(Error::RankZeroDesign);
    }
    let rows = design.cells.len();
    let z_all = DMatrix::from_fn(rows, z_cols.len(), |r, c| z_cols[c].1[r]);
    // Fit against a zero outcome: only the factorisation is needed here.
    let ls = least_squares(&z_all, &DVector::zeros(rows))?;
    if ls.rank == 0 {
        return Err(Error::RankZeroDesign);
    }
    let collinear = ls.dropped.iter().map(|&c| z_cols[c].0).collect();
    let retained: Vec<i64> = ls.retained.iter().map(|&c| z_cols[c].0).collect();
    let z = DMatrix::from_fn(rows, ls.retained.len(), |r, c| z_all[(r, ls.retained[c])]);
    Ok(ResidualisedDesign {
        design,
        n,
        periods: panel.periods(),
        cohorts: panel.cohorts().to_vec(),
        retained,
        not_identified,
        collinear,
        z,
        ztz_inv: ls.xtx_inv,
    })
}

/// TWFE event-study coefficients with unit-clustered standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TwfeFit {
    pub coefficients: BTreeMap<i64, f64>,
    pub se: BTreeMap<i64, f64>,
    /// Cluster-robust covariance in `retained` order.
    #[serde(skip)]
    pub vcov: DMatrix<f64>,
    pub retained: Vec<i64>,
    pub not_identified: Vec<i64>,
    pub collinear: Vec<i64>,
}

impl ResidualisedDesign {
    fn stacked(&self, panel: &Panel) -> DVector<f64> {
        DVector::from_iterator(self.design.cells.len(), self.design.cells.iter().map(|&(i, t)| panel.y(i, t)))
    }

    /// `π(k)` over stacked observed cells.
    pub fn pi_stacked(&self, k: i64) -> Result<DVector<f64>> {
        let pos = self.retained.binary_search(&k).map_err(|_| Error::DroppedColumn { k })?;
        Ok(&self.z * self.ztz_inv.column(pos))
    }

    /// `π(k)` on the full row-major `n x T` grid, zero on unobserved cells.
    pub fn pi(&self, k: i64) -> Result<Vec<f64>> {
        Ok(self.spread(&self.pi_stacked(k)?))
    }

    fn spread(&self, stacked: &DVector<f64>) -> Vec<f64> {
        let tl = self.periods as usize;
        let mut full = vec![0.0; self.n * tl];
        for (r, &(i, t)) in self.design.cells.iter().enumerate() {
            full[i * tl + t as usize - 1] = stacked[r];
        }
        full
    }

    /// Regression of the panel's outcome on the design.
    pub fn fit(&self, panel: &Panel) -> Result<TwfeFit> {
        let y = self.stacked(panel);
        let beta = &self.ztz_inv * (self.z.transpose() * &y);
        // Residuals of the full two-way regression are M_X Y - Z beta.
        let tl = self.periods as usize;
        let ydm = twoway_demean(panel.outcomes(), panel.observed_mask(), self.n, tl, DEMEAN_TOL)?;
        let p = self.retained.len();
        let mut scores = DMatrix::zeros(self.n, p);
        for (r, &(i, t)) in self.design.cells.iter().enumerate() {
            let zr = self.z.row(r);
            let e = ydm[i * tl + t as usize - 1] - (zr * &beta)[0];
            for c in 0..p {
                scores[(i, c)] += zr[c] * e;
            }
        }
        let clusters = self.n as f64;
        let meat = scores.transpose() * &scores;
        let adj = if clusters > 1.0 { clusters / (clusters - 1.0) } else { 1.0 };
        let vcov = &self.ztz_inv * meat * &self.ztz_inv * adj;
        let coefficients = self.retained.iter().zip(beta.iter()).map(|(&k, &b)| (k, b)).collect();
        let se = self.retained.iter().enumerate().map(|(c, &k)| (k, vcov[(c, c)].max(0.0).sqrt())).collect();
        Ok(TwfeFit {
            coefficients,
            se,
            vcov,
            retained: self.retained.clone(),
            not_identified: self.not_identified.clone(),
            collinear: self.collinear.clone(),
        })
    }

    /// Cohort-horizon weights of `β̂_k`.
    pub fn weights(&self, k: i64) -> Result<WeightDecomposition> {
        let pi = self.pi_stacked(k)?;
        let cols = &self.design.columns;
        let mut window = BTreeMap::new();
        let mut outside = BTreeMap::new();
        for (r, &(i, t)) in self.design.cells.iter().enumerate() {
            let Some(g) = self.cohorts[i].adoption() else { continue };
            let kp = t as i64 - g as i64;
            let target = if cols.binary_search(&kp).is_ok() { &mut window } else { &mut outside };
            *target.entry((g, kp)).or_insert(0.0) += pi[r];
        }
        Ok(WeightDecomposition { target: k, pi: self.spread(&pi), window, outside })
    }
}

/// In-sample weights of one event-study coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDecomposition {
    pub target: i64,
    /// `π(k)` on the row-major `n x T` grid.
    pub pi: Vec<f64>,
    /// `w_{g,k'}(k)` for treated cells whose `k'` is a regression column.
    pub window: BTreeMap<(u32, i64), f64>,
    /// The same sums for treated cells the window leaves out (including the
    /// baseline). Injecting an effect there still moves `β̂_k` by this amount.
    pub outside: BTreeMap<(u32, i64), f64>,
}

impl WeightDecomposition {
    pub fn total(&self) -> f64 {
        self.window.values().sum()
    }

    /// Weight of any treated cohort-horizon cell, window or not.
    pub fn weight(&self, g: u32, kp: i64) -> f64 {
        self.window.get(&(g, kp)).or_else(|| self.outside.get(&(g, kp))).copied().unwrap_or(0.0)
    }
}

pub fn twfe_event_coeffs(panel: &Panel, window: &EventWindow) -> Result<TwfeFit> {
    residualise(panel, window)?.fit(panel)
}

pub fn coefficient_weights(panel: &Panel, window: &EventWindow, k: i64) -> Result<WeightDecomposition> {
    if !window.columns().contains(&k) {
        return Err(Error::InvalidWindow(format!("{k} is not a regression column of the window")));
    }
    residualise(panel, window)?.weights(k)
}

/// Writes `target_k,g,k_prime,weight` rows for the window cells.
pub fn write_weights_csv<W: Write>(out: W, decomps: &[WeightDecomposition]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["target_k", "g", "k_prime", "weight"])?;
    for d in decomps {
        for (&(g, kp), &v) in &d.window {
            w.write_record([d.target.to_string(), g.to_string(), kp.to_string(), format!("{v:.12e}")])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn panel_of(periods: u32, cohorts: Vec<Cohort>, y: Vec<f64>) -> Panel {
        Panel::from_arrays(periods, cohorts, y, 0, vec![], None, None).unwrap()
    }

    fn zero_panel(periods: u32, cohorts: Vec<Cohort>) -> Panel {
        let n = cohorts.len();
        panel_of(periods, cohorts, vec![0.0; n * periods as usize])
    }

    /// OLS with explicit unit dummies, period dummies (first dropped) and the
    /// event indicators, solved through the SVD pseudo-inverse.
    pub(crate) fn dummy_ols(panel: &Panel, window: &EventWindow) -> BTreeMap<i64, f64> {
        let d = build_event_design(panel, window).unwrap();
        let (n, tl) = (panel.n(), panel.periods() as usize);
        let support = d.support();
        let cols: Vec<usize> = (0..d.columns.len()).filter(|&j| support[j] > 0).collect();
        let p = n + tl - 1 + cols.len();
        let x = DMatrix::from_fn(d.cells.len(), p, |r, c| {
            let (i, t) = d.cells[r];
            if c < n {
                (c == i) as u8 as f64
            } else if c < n + tl - 1 {
                (c - n + 2 == t as usize) as u8 as f64
            } else {
                (d.column_of[r] == Some(cols[c + 1 - n - tl])) as u8 as f64
            }
        });
        let y = DVector::from_iterator(d.cells.len(), d.cells.iter().map(|&(i, t)| panel.y(i, t)));
        let b = x.clone().pseudo_inverse(1e-10).unwrap() * y;
        cols.iter().enumerate().map(|(m, &j)| (d.columns[j], b[n + tl - 1 + m])).collect()
    }

    fn mc81_timing(per_cohort: usize) -> Vec<Cohort> {
        let mut c = Vec::new();
        for g in [Cohort::At(4), Cohort::At(6), Cohort::At(8), Cohort::At(10), Cohort::Never] {
            c.extend(std::iter::repeat(g).take(per_cohort));
        }
        c
    }

    #[test]
    fn single_unit_design() {
        let p = zero_panel(3, vec![Cohort::At(2)]);
        let w = EventWindow::new(vec![-1, 0, 1], -1).unwrap();
        let d = build_event_design(&p, &w).unwrap();
        assert_eq!(d.columns, vec![0, 1]);
        let m = d.matrix();
        assert_eq!(m.column(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
        assert_eq!(m.column(1).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn never_treated_design_is_zero() {
        let p = zero_panel(4, vec![Cohort::Never; 3]);
        let d = build_event_design(&p, &EventWindow::range(-2, 2, -1).unwrap()).unwrap();
        assert!(d.matrix().iter().all(|&v| v == 0.0));
        assert_eq!(residualise(&p, &EventWindow::range(-2, 2, -1).unwrap()).unwrap_err(), Error::RankZeroDesign);
    }

    #[test]
    fn support_counts_on_staggered_timing() {
        let p = zero_panel(12, mc81_timing(3));
        let d = build_event_design(&p, &EventWindow::range(-5, 5, -1).unwrap()).unwrap();
        for (j, &k) in d.columns.iter().enumerate() {
            let expect: usize = [4i64, 6, 8, 10].iter().filter(|&&g| (1..=12).contains(&(g + k))).count() * 3;
            assert_eq!(d.support()[j], expect, "k = {k}");
        }
    }

    #[test]
    fn two_by_two_did() {
        let cohorts = vec![Cohort::At(2), Cohort::At(2), Cohort::Never, Cohort::Never];
        let fe = [0.3, -1.0, 2.0, 0.5];
        let y: Vec<f64> = (0..4)
            .flat_map(|i| (1..=2).map(move |t| fe[i] + 0.7 * t as f64 + if i < 2 && t == 2 { 1.0 } else { 0.0 }))
            .collect();
        let p = panel_of(2, cohorts, y);
        let fit = twfe_event_coeffs(&p, &EventWindow::new(vec![-1, 0], -1).unwrap()).unwrap();
        assert!((fit.coefficients[&0] - 1.0).abs() < 1e-12);
    }

    fn toy() -> Panel {
        zero_panel(4, vec![Cohort::At(2), Cohort::At(3), Cohort::Never])
    }

    /// Outcome with unit effect in every cell of cohort-horizon `(g, kp)`.
    fn injected(panel: &Panel, g: u32, kp: i64) -> Panel {
        let tl = panel.periods();
        let y = (0..panel.n())
            .flat_map(|i| {
                (1..=tl).map(move |t| (panel.cohort(i) == Cohort::At(g) && t as i64 - g as i64 == kp) as u8 as f64)
            })
            .collect();
        panel.with_outcomes(y).unwrap()
    }

    fn check_injection(panel: &Panel, window: &EventWindow) {
        let rd = residualise(panel, window).unwrap();
        for &k in &rd.retained {
            let w = rd.weights(k).unwrap();
            assert!((w.total() - 1.0).abs() < 1e-8);
            for g in panel.treated_cohorts() {
                for t in 1..=panel.periods() {
                    let kp = t as i64 - g as i64;
                    let beta = rd.fit(&injected(panel, g, kp)).unwrap().coefficients[&k];
                    assert!((beta - w.weight(g, kp)).abs() < 1e-10, "k={k} g={g} k'={kp}");
                }
            }
        }
    }

    #[test]
    fn toy_injection_duality() {
        check_injection(&toy(), &EventWindow::new(vec![-1, 0, 1], -1).unwrap());
    }

    #[test]
    fn single_cohort_weights_are_convex() {
        let p = zero_panel(5, vec![Cohort::At(3), Cohort::At(3), Cohort::Never, Cohort::Never, Cohort::Never]);
        let w = EventWindow::range(-2, 2, -1).unwrap();
        let rd = residualise(&p, &w).unwrap();
        for &k in &rd.retained {
            let d = rd.weights(k).unwrap();
            for (&(_, kp), &v) in &d.window {
                assert!(v >= -1e-10);
                if kp != k {
                    assert!(v.abs() < 1e-10);
                }
            }
        }
        let d = coefficient_weights(&p, &EventWindow::new(vec![-1, 0], -1).unwrap(), 0).unwrap();
        assert!((d.window[&(3, 0)] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn staggered_timing_contaminates() {
        let p = zero_panel(12, mc81_timing(2));
        let rd = residualise(&p, &EventWindow::saturated(&p).unwrap()).unwrap();
        let mut cross = 0.0_f64;
        let mut neg = 0.0_f64;
        for &k in &rd.retained {
            let d = rd.weights(k).unwrap();
            cross = cross.max(d.window.iter().filter(|(c, _)| c.1 != k).map(|(_, v)| v.abs()).sum());
            neg = neg.max(d.window.values().filter(|v| **v < 0.0).map(|v| v.abs()).sum());
        }
        assert!(cross > 1e-6 && neg > 1e-6);
    }

    #[test]
    fn linear_functional_and_dummy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = zero_panel(6, vec![Cohort::At(2), Cohort::At(3), Cohort::At(3), Cohort::At(5), Cohort::Never, Cohort::Never]);
        let w = EventWindow::range(-3, 3, -1).unwrap();
        let rd = residualise(&p, &w).unwrap();
        let pis: Vec<(i64, Vec<f64>)> = rd.retained.iter().map(|&k| (k, rd.pi(k).unwrap())).collect();
        for rep in 0..100 {
            let y: Vec<f64> = (0..36).map(|_| rng.random_range(-3.0..3.0)).collect();
            let py = p.with_outcomes(y.clone()).unwrap();
            let fit = rd.fit(&py).unwrap();
            for (k, pi) in &pis {
                let lin: f64 = pi.iter().zip(&y).map(|(a, b)| a * b).sum();
                assert!((lin - fit.coefficients[k]).abs() < 1e-8);
            }
            if rep < 5 {
                let oracle = dummy_ols(&py, &w);
                for (k, b) in &fit.coefficients {
                    assert!((oracle[k] - b).abs() < 1e-8);
                }
            }
        }
    }

    #[test]
    fn weights_csv_header() {
        let d = coefficient_weights(&toy(), &EventWindow::new(vec![-1, 0, 1], -1).unwrap(), 0).unwrap();
        let mut buf = Vec::new();
        write_weights_csv(&mut buf, &[d]).unwrap();
        let s = String::from_utf8(buf).unwrap();
        assert!(s.starts_with("target_k,g,k_prime,weight\n"));
    }

    fn arb_design() -> impl Strategy<Value = (u32, Vec<Cohort>)> {
        (3u32..=6).prop_flat_map(|t| {
            let cohort = prop_oneof![Just(Cohort::Never), (2..=t).prop_map(Cohort::At)];
            (Just(t), prop::collection::vec(cohort, 3..=12))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn injection_duality_holds(design in arb_design()) {
            let (t, mut cohorts) = design;
            cohorts.push(Cohort::Never);
            cohorts.push(Cohort::At(2));
            let p = zero_panel(t, cohorts);
            check_injection(&p, &EventWindow::range(-2, 2, -1).unwrap());
        }
    }
}

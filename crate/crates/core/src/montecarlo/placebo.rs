//! Pre-trend placebo tests: the two-arm means contrast and the pooled Wald
//! test on short-difference pre-period cells.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::group_time::placebo_cell;
use crate::panel::{Cohort, Panel};
use crate::sensitivity::critical_value;

/// Levels at which placebo rejection is reported.
pub const REJECTION_ALPHAS: [f64; 3] = [0.10, 0.05, 0.01];
/// Pre-period event times tested by the pooled Wald variant.
pub const WALD_LEADS: [i64; 3] = [-3, -2, -1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PlaceboVariant {
    /// Periods 3:4 against 1:2, treated minus control.
    Mc84Means,
    /// Joint test that pooled leads `-3, -2, -1` are zero.
    Mc81Wald,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaceboResult {
    pub estimate: Vec<f64>,
    pub statistic: f64,
    pub p_value: f64,
    pub df: usize,
    /// Rejection at each of [`REJECTION_ALPHAS`].
    pub reject: [bool; 3],
}

pub fn placebo_test(panel: &Panel, variant: PlaceboVariant, cohort_weights: &BTreeMap<u32, f64>) -> Result<PlaceboResult> {
    match variant {
        PlaceboVariant::Mc84Means => means_contrast(panel),
        PlaceboVariant::Mc81Wald => pooled_wald(panel, cohort_weights),
    }
}

fn means_contrast(panel: &Panel) -> Result<PlaceboResult> {
    if panel.periods() < 4 {
        return Err(Error::InsufficientPrePeriods("the means contrast needs periods 1 to 4".into()));
    }
    let (mut tr, mut co) = (vec![], vec![]);
    for i in 0..panel.n() {
        if !(1..=4).all(|t| panel.observed(i, t)) {
            continue;
        }
        let d = (panel.y(i, 3) + panel.y(i, 4) - panel.y(i, 1) - panel.y(i, 2)) / 2.0;
        match panel.cohort(i) {
            Cohort::Never => co.push(d),
            Cohort::At(g) if g > 4 => tr.push(d),
            _ => {}
        }
    }
    if tr.len() < 2 || co.len() < 2 {
        return Err(Error::InsufficientPrePeriods("the means contrast needs two units per arm adopting after period 4".into()));
    }
    let moments = |v: &[f64]| {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        let s2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64;
        (m, s2 / v.len() as f64)
    };
    let ((mt, vt), (mc, vc)) = (moments(&tr), moments(&co));
    let est = mt - mc;
    let se = (vt + vc).sqrt();
    // Outcomes without noise leave only rounding in `se`.
    let tol = 1e-12 * (1.0 + mt.abs() + mc.abs());
    let z = if se > tol { est / se } else if est.abs() <= tol { 0.0 } else { f64::INFINITY };
    let p = 2.0 * (1.0 - Normal::standard().cdf(z.abs()));
    let mut reject = [false; 3];
    for (r, &a) in reject.iter_mut().zip(&REJECTION_ALPHAS) {
        *r = z.abs() > critical_value(a)?;
    }
    Ok(PlaceboResult { estimate: vec![est], statistic: z, p_value: p, df: 1, reject })
}

fn pooled_wald(panel: &Panel, cohort_weights: &BTreeMap<u32, f64>) -> Result<PlaceboResult> {
    let n = panel.n();
    let mut est = vec![];
    let mut infl: Vec<Vec<f64>> = vec![];
    for &lead in &WALD_LEADS {
        let (mut p, mut wsum) = (0.0, 0.0);
        let mut f = vec![0.0; n];
        for (&g, &w) in cohort_weights {
            let t = g as i64 + lead;
            if t < 2 || w <= 0.0 {
                continue;
            }
            let Ok(cell) = placebo_cell(panel, g, t as u32) else { continue };
            p += w * cell.estimate;
            wsum += w;
            for (a, b) in f.iter_mut().zip(&cell.influence) {
                *a += w * b;
            }
        }
        if wsum > 0.0 {
            est.push(p / wsum);
            infl.push(f.into_iter().map(|v| v / wsum).collect());
        }
    }
    let df = est.len();
    if df == 0 {
        return Err(Error::InsufficientPrePeriods("no cohort has an estimable lead".into()));
    }
    let v = DMatrix::from_fn(df, df, |a, b| infl[a].iter().zip(&infl[b]).map(|(x, y)| x * y).sum());
    let inv = v
        .clone()
        .cholesky()
        .map(|c| c.inverse())
        .ok_or_else(|| Error::InvalidInput("placebo covariance is singular".into()))?;
    let e = DVector::from_vec(est.clone());
    let stat = (e.transpose() * inv * &e)[(0, 0)];
    let chi = ChiSquared::new(df as f64).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let p = 1.0 - chi.cdf(stat);
    let mut reject = [false; 3];
    for (r, &a) in reject.iter_mut().zip(&REJECTION_ALPHAS) {
        *r = p < a;
    }
    Ok(PlaceboResult { estimate: est, statistic: stat, p_value: p, df, reject })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montecarlo::dgp::{simulate, true_targets, DgpSpec, Design, Violation};
    use crate::montecarlo::rng::hash64;

    fn shares(spec: &DgpSpec) -> BTreeMap<u32, f64> {
        let t = true_targets(spec).unwrap();
        let mut m = BTreeMap::new();
        for ((g, _), w) in t.weights {
            *m.entry(g).or_insert(0.0) += w;
        }
        m
    }

    #[test]
    fn constant_shift_cancels() {
        let y: Vec<f64> = (0..40).map(|idx| if idx / 8 < 2 { 3.0 } else { 0.0 } + (idx % 8) as f64 * 0.1).collect();
        let cohorts = vec![Cohort::At(5), Cohort::At(5), Cohort::Never, Cohort::Never, Cohort::Never];
        let p = Panel::from_arrays(8, cohorts, y, 0, vec![], None, None).unwrap();
        let r = placebo_test(&p, PlaceboVariant::Mc84Means, &BTreeMap::new()).unwrap();
        assert!(r.estimate[0].abs() < 1e-12 && !r.reject[2]);
    }

    #[test]
    fn means_contrast_size() {
        let base = DgpSpec::new(Design::Mc84Small);
        let w = shares(&base);
        let reps = 400;
        let rej = (0..reps)
            .filter(|&r| {
                let p = simulate(&base.clone().with_seed(hash64(3, r))).unwrap();
                placebo_test(&p, PlaceboVariant::Mc84Means, &w).unwrap().reject[1]
            })
            .count() as f64
            / reps as f64;
        assert!((rej - 0.05).abs() < 3.0 * (0.05f64 * 0.95 / reps as f64).sqrt() + 1e-9, "{rej}");
    }

    #[test]
    fn pooled_wald_size_and_power() {
        let base = DgpSpec::new(Design::Mc81Dgp1).with_n(1000);
        let w = shares(&base);
        let reps = 150;
        let rate = |spec: &DgpSpec| {
            (0..reps)
                .filter(|&r| {
                    let p = simulate(&spec.clone().with_seed(hash64(9, r))).unwrap();
                    let res = placebo_test(&p, PlaceboVariant::Mc81Wald, &w).unwrap();
                    assert_eq!(res.df, 3);
                    res.reject[1]
                })
                .count() as f64
                / reps as f64
        };
        let null = rate(&base);
        assert!(null < 0.05 + 3.0 * (0.05f64 * 0.95 / reps as f64).sqrt(), "{null}");
        let mut strong = base.clone().with_violation(Violation::new(1.0, 2.0, 0.0));
        strong.mc81.signs = vec![1.0; 4];
        assert!(rate(&strong) > 0.5);
    }

    #[test]
    fn insufficient_leads() {
        let p = Panel::from_arrays(3, vec![Cohort::At(3), Cohort::Never], vec![0.0; 6], 0, vec![], None, None).unwrap();
        assert!(matches!(placebo_test(&p, PlaceboVariant::Mc84Means, &BTreeMap::new()), Err(Error::InsufficientPrePeriods(_))));
        let w: BTreeMap<u32, f64> = [(2, 1.0)].into_iter().collect();
        let p = Panel::from_arrays(3, vec![Cohort::At(2), Cohort::Never], vec![0.0; 6], 0, vec![], None, None).unwrap();
        assert!(matches!(placebo_test(&p, PlaceboVariant::Mc81Wald, &w), Err(Error::InsufficientPrePeriods(_))));
    }
}

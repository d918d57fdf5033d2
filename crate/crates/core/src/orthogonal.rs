//! Riesz representers, the doubly robust score, cross-fitted cohort-period
//! effects and a numerical check of Neyman orthogonality.
//!
//! Within a cell `(g, t)` the outcome is the long difference
//! `Y_it - Y_{i,g-1}` and the covariates are `X_{i,g-1}`, on the comparison
//! sample `G ∈ {g, never}`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::group_time::OVERLAP_CLIP;
use crate::montecarlo::rng::{hash64, stream};
use crate::panel::{Cohort, Panel};
use crate::regression::{fit_logit, least_squares, predict_logit, LOGIT_RIDGE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Group {
    Treated,
    Control,
    Other,
}

/// Unit-level observations `(Y, X, group)` for one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSample {
    pub y: Vec<f64>,
    pub x: Vec<Vec<f64>>,
    pub group: Vec<Group>,
    /// Panel unit index of each observation, when built from a panel.
    pub units: Vec<usize>,
}

impl ScoreSample {
    pub fn from_panel(panel: &Panel, g: u32, t: u32) -> Result<ScoreSample> {
        if g < 2 {
            return Err(Error::MissingBasePeriod { g });
        }
        let base = g - 1;
        let mut s = ScoreSample { y: vec![], x: vec![], group: vec![], units: vec![] };
        for i in 0..panel.n() {
            let grp = match panel.cohort(i) {
                Cohort::Never => Group::Control,
                Cohort::At(h) if h == g => Group::Treated,
                _ => continue,
            };
            if !(panel.observed(i, t) && panel.observed(i, base)) {
                continue;
            }
            s.y.push(panel.y(i, t) - panel.y(i, base));
            s.x.push(panel.x(i, base).to_vec());
            s.group.push(grp);
            s.units.push(i);
        }
        if !s.group.contains(&Group::Treated) {
            return Err(Error::EmptyTreatedSet { g, t });
        }
        if !s.group.contains(&Group::Control) {
            return Err(Error::EmptyControlSet { g, t });
        }
        Ok(s)
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn count(&self, grp: Group) -> usize {
        self.group.iter().filter(|&&g| g == grp).count()
    }
}

/// Scaled representer `α(x) = scale · p(x)/(1 - p(x))` with `p` a logit of
/// cohort membership on `(1, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Representer {
    pub coefficients: DVector<f64>,
    pub scale: f64,
}

impl Representer {
    pub fn odds(&self, x: &[f64]) -> f64 {
        let mut row = Vec::with_capacity(x.len() + 1);
        row.push(1.0);
        row.extend_from_slice(x);
        let p = predict_logit(&self.coefficients, &row);
        p / (1.0 - p)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.scale * self.odds(x)
    }
}

fn design_with_intercept(rows: &[&Vec<f64>]) -> DMatrix<f64> {
    let d = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), d + 1, |r, c| if c == 0 { 1.0 } else { rows[r][c - 1] })
}

/// Fits the odds model on `train` and rescales it so that the controls in
/// `balance` carry total weight equal to the treated count in `balance`.
fn fit_representer(sample: &ScoreSample, train: &[usize], balance: &[usize], cell: (u32, u32)) -> Result<Representer> {
    let rows: Vec<&Vec<f64>> = train.iter().map(|&r| &sample.x[r]).collect();
    let x = design_with_intercept(&rows);
    let labels: Vec<bool> = train.iter().map(|&r| sample.group[r] == Group::Treated).collect();
    let fit = fit_logit(&x, &labels, LOGIT_RIDGE)?;
    let mut rep = Representer { coefficients: fit.coefficients, scale: 1.0 };
    let mut total = 0.0;
    let mut n_g = 0usize;
    for &r in balance {
        let mut row = vec![1.0];
        row.extend_from_slice(&sample.x[r]);
        let p = predict_logit(&rep.coefficients, &row);
        if p >= OVERLAP_CLIP {
            return Err(Error::OverlapFailure { g: cell.0, t: cell.1 });
        }
        match sample.group[r] {
            Group::Control => total += p / (1.0 - p),
            Group::Treated => n_g += 1,
            Group::Other => {}
        }
    }
    if total <= 0.0 {
        return Err(Error::OverlapFailure { g: cell.0, t: cell.1 });
    }
    rep.scale = n_g as f64 / total;
    Ok(rep)
}

/// Representer for cell `(g, t)` fitted and balanced on the whole sample.
pub fn riesz_representer(panel: &Panel, g: u32, t: u32) -> Result<(Representer, ScoreSample)> {
    let sample = ScoreSample::from_panel(panel, g, t)?;
    let all: Vec<usize> = (0..sample.len()).collect();
    let rep = fit_representer(&sample, &all, &all, (g, t))?;
    Ok((rep, sample))
}

/// `ψ = 1{g}(Y - θ) - 1{g} m(X) - 1{∞} α(X) (Y - m(X))`.
pub fn dr_score(y: f64, x: &[f64], group: Group, theta: f64, m: &dyn Fn(&[f64]) -> f64, alpha: &dyn Fn(&[f64]) -> f64) -> f64 {
    match group {
        Group::Treated => y - theta - m(x),
        Group::Control => -alpha(x) * (y - m(x)),
        Group::Other => 0.0,
    }
}

/// The score without its dual (residual-reweighting) term.
pub fn plugin_score(y: f64, x: &[f64], group: Group, theta: f64, m: &dyn Fn(&[f64]) -> f64) -> f64 {
    match group {
        Group::Treated => y - theta - m(x),
        _ => 0.0,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum ScoreKind {
    Orthogonal,
    PlugIn,
}

/// Sample mean of the score and its Monte Carlo standard error.
pub fn mean_score(
    sample: &ScoreSample,
    theta: f64,
    m: &dyn Fn(&[f64]) -> f64,
    alpha: &dyn Fn(&[f64]) -> f64,
    kind: ScoreKind,
) -> (f64, f64) {
    let n = sample.len() as f64;
    let vals: Vec<f64> = (0..sample.len())
        .map(|r| match kind {
            ScoreKind::Orthogonal => dr_score(sample.y[r], &sample.x[r], sample.group[r], theta, m, alpha),
            ScoreKind::PlugIn => plugin_score(sample.y[r], &sample.x[r], sample.group[r], theta, m),
        })
        .collect();
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Unit-level fold assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldPlan {
    pub folds: usize,
    pub assignment: Vec<usize>,
}

impl FoldPlan {
    /// Shuffles `0..n` with a ChaCha8 stream seeded by `hash64(seed, n)` and
    /// deals positions round-robin, so folds differ in size by at most one.
    pub fn new(n: usize, folds: usize, seed: u64) -> Result<FoldPlan> {
        if folds < 2 || n < folds {
            return Err(Error::InvalidInput(format!("cannot split {n} units into {folds} folds")));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(hash64(seed, n as u64));
        order.shuffle(&mut rng);
        let mut assignment = vec![0; n];
        for (pos, &unit) in order.iter().enumerate() {
            assignment[unit] = pos % folds;
        }
        Ok(FoldPlan { folds, assignment })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossfitResult {
    pub g: u32,
    pub t: u32,
    pub estimate: f64,
    pub se: f64,
    pub n_treated: usize,
    pub n_control: usize,
    /// Influence values on panel units (`ψ_i / n_g`).
    #[serde(skip)]
    pub influence: Vec<f64>,
}

/// Cross-fitted doubly robust `GATT(g, t)`.
///
/// For each fold, `m̂` is OLS of `Y` on `(1, X)` over the other folds'
/// controls and `α̂` is a logit-odds representer fitted on the other folds
/// and rescaled to balance the fold's own treated count.
pub fn crossfit_gatt(panel: &Panel, g: u32, t: u32, folds: usize, seed: u64) -> Result<CrossfitResult> {
    let sample = ScoreSample::from_panel(panel, g, t)?;
    let plan = FoldPlan::new(panel.n(), folds, seed)?;
    let fold_of: Vec<usize> = sample.units.iter().map(|&u| plan.assignment[u]).collect();
    let n_g = sample.count(Group::Treated) as f64;
    let mut m_hat = vec![0.0; sample.len()];
    let mut a_hat = vec![0.0; sample.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..sample.len()).filter(|&r| fold_of[r] != f).collect();
        let eval: Vec<usize> = (0..sample.len()).filter(|&r| fold_of[r] == f).collect();
        let has = |set: &[usize], grp: Group| set.iter().any(|&r| sample.group[r] == grp);
        if !has(&train, Group::Treated) || !has(&train, Group::Control) || !has(&eval, Group::Control) {
            return Err(Error::FoldCohortStarvation { fold: f });
        }
        let ctrl: Vec<&Vec<f64>> = train.iter().filter(|&&r| sample.group[r] == Group::Control).map(|&r| &sample.x[r]).collect();
        let yc = DVector::from_iterator(
            ctrl.len(),
            train.iter().filter(|&&r| sample.group[r] == Group::Control).map(|&r| sample.y[r]),
        );
        let beta = least_squares(&design_with_intercept(&ctrl), &yc)?.coefficients;
        let rep = fit_representer(&sample, &train, &eval, (g, t))?;
        for &r in &eval {
            let x = &sample.x[r];
            m_hat[r] = beta[0] + x.iter().zip(beta.iter().skip(1)).map(|(a, b)| a * b).sum::<f64>();
            a_hat[r] = rep.eval(x);
        }
    }
    let mut num = 0.0;
    for r in 0..sample.len() {
        match sample.group[r] {
            Group::Treated => num += sample.y[r] - m_hat[r],
            Group::Control => num -= a_hat[r] * (sample.y[r] - m_hat[r]),
            Group::Other => {}
        }
    }
    let theta = num / n_g;
    let mut influence = vec![0.0; panel.n()];
    let mut ss = 0.0;
    for r in 0..sample.len() {
        let psi = dr_score(sample.y[r], &sample.x[r], sample.group[r], theta, &|_| m_hat[r], &|_| a_hat[r]);
        influence[sample.units[r]] = psi / n_g;
        ss += psi * psi;
    }
    Ok(CrossfitResult {
        g,
        t,
        estimate: theta,
        se: ss.sqrt() / n_g,
        n_treated: sample.count(Group::Treated),
        n_control: sample.count(Group::Control),
        influence,
    })
}

/// In-sample conditional means and density ratios for a discrete covariate:
/// `m̂(x)` is the control mean in the cell of `x`, `α̂(x) = n_g(x)/n_∞(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellNuisances {
    pub m: BTreeMap<Vec<u64>, f64>,
    pub alpha: BTreeMap<Vec<u64>, f64>,
}

fn cell_key(x: &[f64]) -> Vec<u64> {
    x.iter().map(|v| v.to_bits()).collect()
}

impl CellNuisances {
    pub fn fit(sample: &ScoreSample) -> Result<CellNuisances> {
        let mut acc: BTreeMap<Vec<u64>, (f64, usize, usize)> = BTreeMap::new();
        for r in 0..sample.len() {
            let e = acc.entry(cell_key(&sample.x[r])).or_insert((0.0, 0, 0));
            match sample.group[r] {
                Group::Control => {
                    e.0 += sample.y[r];
                    e.1 += 1;
                }
                Group::Treated => e.2 += 1,
                Group::Other => {}
            }
        }
        let mut m = BTreeMap::new();
        let mut alpha = BTreeMap::new();
        for (k, (s, nc, nt)) in acc {
            if nc == 0 {
                return Err(Error::OverlapFailure { g: 0, t: 0 });
            }
            m.insert(k.clone(), s / nc as f64);
            alpha.insert(k, nt as f64 / nc as f64);
        }
        Ok(CellNuisances { m, alpha })
    }

    pub fn m(&self, x: &[f64]) -> f64 {
        self.m.get(&cell_key(x)).copied().unwrap_or(0.0)
    }

    pub fn alpha(&self, x: &[f64]) -> f64 {
        self.alpha.get(&cell_key(x)).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrthogonalityReport {
    pub eps: Vec<f64>,
    pub mean_scores: Vec<f64>,
    pub constant: f64,
    pub linear: f64,
    pub quadratic: f64,
    pub kind: ScoreKind,
}

impl OrthogonalityReport {
    /// `|linear| < 1e-2 · |quadratic| · max|ε|`.
    pub fn passes(&self) -> bool {
        let eps_max = self.eps.iter().fold(0.0_f64, |m, e| m.max(e.abs()));
        self.linear.abs() < 1e-2 * self.quadratic.abs() * eps_max
    }
}

/// Mean score along `(m0 + ε h_m, α0 + ε h_α)` with a quadratic fitted in ε.
#[allow(clippy::too_many_arguments)]
pub fn orthogonality_check(
    sample: &ScoreSample,
    theta: f64,
    m0: &dyn Fn(&[f64]) -> f64,
    alpha0: &dyn Fn(&[f64]) -> f64,
    h_m: &dyn Fn(&[f64]) -> f64,
    h_alpha: &dyn Fn(&[f64]) -> f64,
    eps: &[f64],
    kind: ScoreKind,
) -> Result<OrthogonalityReport> {
    let mut distinct = eps.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::InvalidInput("orthogonality check needs at least 3 distinct epsilons".into()));
    }
    let mean_scores: Vec<f64> = eps
        .iter()
        .map(|&e| {
            let m = |x: &[f64]| m0(x) + e * h_m(x);
            let a = |x: &[f64]| alpha0(x) + e * h_alpha(x);
            mean_score(sample, theta, &m, &a, kind).0
        })
        .collect();
    let x = DMatrix::from_fn(eps.len(), 3, |r, c| eps[r].powi(c as i32));
    let fit = least_squares(&x, &DVector::from_vec(mean_scores.clone()))?;
    Ok(OrthogonalityReport {
        eps: eps.to_vec(),
        mean_scores,
        constant: fit.coefficients[0],
        linear: fit.coefficients[1],
        quadratic: fit.coefficients[2],
        kind,
    })
}

/// Known population quantities of [`discrete_score_sample`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscreteTruth {
    pub theta: f64,
    /// `m0` at x = 1 (a) and x = 0 (b).
    pub m0: [f64; 2],
    pub alpha0: [f64; 2],
}

impl DiscreteTruth {
    pub fn m(&self, x: &[f64]) -> f64 {
        if x[0] == 1.0 { self.m0[0] } else { self.m0[1] }
    }
    pub fn alpha(&self, x: &[f64]) -> f64 {
        if x[0] == 1.0 { self.alpha0[0] } else { self.alpha0[1] }
    }
}

/// Synthetic cell with a binary covariate: equal cohort masses,
/// `P(x=a|g) = 0.6`, `P(x=a|∞) = 0.3`, control mean `m0 = (1, -1)`, effect
/// `τ(a) = 2`, `τ(b) = 0.5`, standard normal noise.
pub fn discrete_score_sample(n: usize, seed: u64) -> (ScoreSample, DiscreteTruth) {
    let mut rng = stream(seed, 0);
    let truth = DiscreteTruth { theta: 0.6 * 2.0 + 0.4 * 0.5, m0: [1.0, -1.0], alpha0: [2.0, 0.4 / 0.7] };
    let mut s = ScoreSample { y: vec![], x: vec![], group: vec![], units: vec![] };
    for i in 0..n {
        let treated = rand::Rng::random::<f64>(&mut rng) < 0.5;
        let pa = if treated { 0.6 } else { 0.3 };
        let a = rand::Rng::random::<f64>(&mut rng) < pa;
        let x = if a { 1.0 } else { 0.0 };
        let noise: f64 = StandardNormal.sample(&mut rng);
        let base = if a { truth.m0[0] } else { truth.m0[1] };
        let eff = if treated { if a { 2.0 } else { 0.5 } } else { 0.0 };
        s.y.push(base + eff + noise);
        s.x.push(vec![x]);
        s.group.push(if treated { Group::Treated } else { Group::Control });
        s.units.push(i);
    }
    (s, truth)
}

//! Cohort-by-period effects, their convex aggregation to event time, the
//! imputation comparator and cumulative paths.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::panel::{Cohort, EventWindow, Panel};
use crate::regression::{fit_logit, least_squares, predict_logit, twoway_demean, DEMEAN_TOL, LOGIT_RIDGE};

/// Propensity values at or above this are an overlap failure.
pub const OVERLAP_CLIP: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    NeverTreated,
    NotYetTreated,
}

impl ControlKind {
    pub fn label(self) -> &'static str {
        match self {
            ControlKind::NeverTreated => "never_treated",
            ControlKind::NotYetTreated => "not_yet_treated",
        }
    }
}

/// Units eligible as comparisons for cohort `g` at period `t`.
pub fn control_set(panel: &Panel, g: u32, t: u32, kind: ControlKind) -> Result<Vec<usize>> {
    let set: Vec<usize> = (0..panel.n())
        .filter(|&i| match (kind, panel.cohort(i)) {
            (_, Cohort::Never) => true,
            (ControlKind::NeverTreated, _) => false,
            (ControlKind::NotYetTreated, Cohort::At(h)) => h > t,
        })
        .collect();
    if set.is_empty() {
        return Err(Error::EmptyControlSet { g, t });
    }
    Ok(set)
}

/// One estimated cohort-period cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GattEntry {
    pub g: u32,
    pub t: u32,
    pub k: i64,
    pub estimate: f64,
    pub se: f64,
    pub n_treated: usize,
    pub n_control: usize,
    pub control: ControlKind,
    /// Unit-level influence values (length `n`, zero off the cell's sample),
    /// scaled so that `se = sqrt(sum of squares)`.
    #[serde(skip)]
    pub influence: Vec<f64>,
}

/// Difference-in-differences of `y_post - y_base` between a treated set and
/// a (possibly weighted) control set.
fn did_cell(
    panel: &Panel,
    g: u32,
    t: u32,
    base: u32,
    treated: &[usize],
    controls: &[usize],
    control_weights: Option<&[f64]>,
    kind: ControlKind,
) -> GattEntry {
    let dy = |i: usize| panel.y(i, t) - panel.y(i, base);
    let n1 = treated.len() as f64;
    let m1 = treated.iter().map(|&i| dy(i)).sum::<f64>() / n1;
    let uniform = vec![1.0 / controls.len() as f64; controls.len()];
    let w = control_weights.unwrap_or(&uniform);
    let m0: f64 = controls.iter().zip(w).map(|(&i, wi)| wi * dy(i)).sum();
    let mut influence = vec![0.0; panel.n()];
    for &i in treated {
        influence[i] = (dy(i) - m1) / n1;
    }
    for (&i, wi) in controls.iter().zip(w) {
        influence[i] = -wi * (dy(i) - m0);
    }
    let se = influence.iter().map(|v| v * v).sum::<f64>().sqrt();
    GattEntry {
        g,
        t,
        k: t as i64 - g as i64,
        estimate: m1 - m0,
        se,
        n_treated: treated.len(),
        n_control: controls.len(),
        control: kind,
        influence,
    }
}

fn observed_pair(panel: &Panel, i: usize, a: u32, b: u32) -> bool {
    panel.observed(i, a) && panel.observed(i, b)
}

/// `GATT(g,t)` for `t >= g` against base period `g-1`.
///
/// With `use_propensity`, controls are reweighted by self-normalised odds
/// `p/(1-p)` from a logit of cohort membership on `(1, X_{i,g-1})` fitted on
/// the treated-plus-control sample. The reported standard error treats the
/// fitted propensity as known.
pub fn gatt_cell(panel: &Panel, g: u32, t: u32, kind: ControlKind, use_propensity: bool) -> Result<GattEntry> {
    if g < 2 {
        return Err(Error::MissingBasePeriod { g });
    }
    if t < g || t > panel.periods() {
        return Err(Error::InvalidInput(format!("cell ({g},{t}) is not a post-adoption period")));
    }
    let base = g - 1;
    let treated: Vec<usize> = (0..panel.n())
        .filter(|&i| panel.cohort(i) == Cohort::At(g) && observed_pair(panel, i, t, base))
        .collect();
    if treated.is_empty() {
        return Err(Error::EmptyTreatedSet { g, t });
    }
    let controls: Vec<usize> =
        control_set(panel, g, t, kind)?.into_iter().filter(|&i| observed_pair(panel, i, t, base)).collect();
    if controls.is_empty() {
        return Err(Error::EmptyControlSet { g, t });
    }
    if !use_propensity {
        return Ok(did_cell(panel, g, t, base, &treated, &controls, None, kind));
    }
    let w = odds_weights(panel, base, &treated, &controls).map_err(|e| match e {
        Error::OverlapFailure { .. } => Error::PropensityOverlapFailure { g, t },
        other => other,
    })?;
    Ok(did_cell(panel, g, t, base, &treated, &controls, Some(&w), kind))
}

/// Self-normalised propensity odds for the controls, from a logit on
/// `(1, X_{i,s})`.
fn odds_weights(panel: &Panel, s: u32, treated: &[usize], controls: &[usize]) -> Result<Vec<f64>> {
    let units: Vec<usize> = treated.iter().chain(controls).copied().collect();
    let dx = panel.d_x();
    let x = DMatrix::from_fn(units.len(), dx + 1, |r, c| if c == 0 { 1.0 } else { panel.x(units[r], s)[c - 1] });
    let labels: Vec<bool> = (0..units.len()).map(|r| r < treated.len()).collect();
    let fit = fit_logit(&x, &labels, LOGIT_RIDGE)?;
    let mut odds = Vec::with_capacity(controls.len());
    for r in 0..units.len() {
        let row: Vec<f64> = x.row(r).iter().copied().collect();
        let p = predict_logit(&fit.coefficients, &row);
        if p >= OVERLAP_CLIP {
            return Err(Error::OverlapFailure { g: 0, t: s });
        }
        if r >= treated.len() {
            odds.push(p / (1.0 - p));
        }
    }
    let total: f64 = odds.iter().sum();
    Ok(odds.into_iter().map(|o| o / total).collect())
}

/// Placebo cell for `t < g`: short difference `Y_t - Y_{t-1}` of cohort `g`
/// against never-treated units.
pub fn placebo_cell(panel: &Panel, g: u32, t: u32) -> Result<GattEntry> {
    if t < 2 || t >= g {
        return Err(Error::InvalidInput(format!("placebo cell ({g},{t}) needs 2 <= t < g")));
    }
    let treated: Vec<usize> = (0..panel.n())
        .filter(|&i| panel.cohort(i) == Cohort::At(g) && observed_pair(panel, i, t, t - 1))
        .collect();
    if treated.is_empty() {
        return Err(Error::EmptyTreatedSet { g, t });
    }
    let controls: Vec<usize> = control_set(panel, g, t, ControlKind::NeverTreated)?
        .into_iter()
        .filter(|&i| observed_pair(panel, i, t, t - 1))
        .collect();
    if controls.is_empty() {
        return Err(Error::EmptyControlSet { g, t });
    }
    Ok(did_cell(panel, g, t, t - 1, &treated, &controls, None, ControlKind::NeverTreated))
}

/// All estimable post-adoption cells of a panel.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GattTable {
    pub entries: BTreeMap<(u32, u32), GattEntry>,
    /// Cells that could not be estimated, with the reason.
    pub skipped: Vec<((u32, u32), String)>,
    pub cohort_sizes: BTreeMap<u32, usize>,
    pub cohort_exposure: Option<BTreeMap<u32, f64>>,
    pub periods: u32,
    pub n: usize,
    pub control: ControlKind,
}

impl GattTable {
    pub fn get(&self, g: u32, k: i64) -> Option<&GattEntry> {
        let t = g as i64 + k;
        if t < 1 {
            return None;
        }
        self.entries.get(&(g, t as u32))
    }

    /// `g,t,k,estimate,se,n_treated,n_control,control_kind`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["g", "t", "k", "estimate", "se", "n_treated", "n_control", "control_kind"])?;
        for e in self.entries.values() {
            w.write_record([
                e.g.to_string(),
                e.t.to_string(),
                e.k.to_string(),
                format!("{:.12e}", e.estimate),
                format!("{:.12e}", e.se),
                e.n_treated.to_string(),
                e.n_control.to_string(),
                e.control.label().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn gatt_table(panel: &Panel, kind: ControlKind, use_propensity: bool) -> Result<GattTable> {
    let mut entries = BTreeMap::new();
    let mut skipped = Vec::new();
    for g in panel.treated_cohorts() {
        for t in g..=panel.periods() {
            match gatt_cell(panel, g, t, kind, use_propensity) {
                Ok(e) => {
                    entries.insert((g, t), e);
                }
                Err(
                    e @ (Error::EmptyControlSet { .. } | Error::EmptyTreatedSet { .. } | Error::MissingBasePeriod { .. }),
                ) => skipped.push(((g, t), e.to_string())),
                Err(e) => return Err(e),
            }
        }
    }
    let mut cohort_sizes = BTreeMap::new();
    let mut exposure: BTreeMap<u32, f64> = BTreeMap::new();
    for i in 0..panel.n() {
        if let Some(g) = panel.cohort(i).adoption() {
            *cohort_sizes.entry(g).or_insert(0) += 1;
            if let Some(w) = panel.exposure() {
                *exposure.entry(g).or_insert(0.0) += w[i];
            }
        }
    }
    Ok(GattTable {
        entries,
        skipped,
        cohort_sizes,
        cohort_exposure: panel.exposure().map(|_| exposure),
        periods: panel.periods(),
        n: panel.n(),
        control: kind,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "shares")]
pub enum AggregationScheme {
    SampleShare,
    /// Supplied cohort probabilities `P(G = g)`.
    PopulationShare(BTreeMap<u32, f64>),
    Exposure,
}

impl AggregationScheme {
    pub fn label(&self) -> &'static str {
        match self {
            AggregationScheme::SampleShare => "sample_share",
            AggregationScheme::PopulationShare(_) => "population_share",
            AggregationScheme::Exposure => "exposure",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EventAggregate {
    pub k: i64,
    pub estimate: f64,
    pub se: f64,
    /// `ω_g(k)` after renormalisation.
    pub weights: BTreeMap<u32, f64>,
    /// Cohorts in `𝒢(k)` without an estimated cell.
    pub dropped: Vec<u32>,
    pub scheme: String,
    #[serde(skip)]
    pub influence: Vec<f64>,
}

/// Convex cohort weights at horizon `k`, renormalised over the cohorts that
/// have an estimated cell.
pub fn aggregation_weights(table: &GattTable, scheme: &AggregationScheme, k: i64) -> Result<(BTreeMap<u32, f64>, Vec<u32>)> {
    let mut raw = BTreeMap::new();
    let mut dropped = Vec::new();
    for (&g, &size) in &table.cohort_sizes {
        let t = g as i64 + k;
        if t < 1 || t > table.periods as i64 {
            continue;
        }
        if table.get(g, k).is_none() {
            dropped.push(g);
            continue;
        }
        let mass = match scheme {
            AggregationScheme::SampleShare => size as f64,
            AggregationScheme::PopulationShare(p) => *p
                .get(&g)
                .ok_or_else(|| Error::InvalidInput(format!("no population share supplied for cohort {g}")))?,
            AggregationScheme::Exposure => {
                table.cohort_exposure.as_ref().ok_or(Error::MissingExposure)?.get(&g).copied().unwrap_or(0.0)
            }
        };
        if !(mass >= 0.0) || !mass.is_finite() {
            return Err(Error::InvalidInput(format!("aggregation mass for cohort {g} must be finite and >= 0")));
        }
        raw.insert(g, mass);
    }
    let total: f64 = raw.values().sum();
    if raw.is_empty() || total <= 0.0 {
        return Err(Error::NoCohortsAtHorizon { horizons: vec![k] });
    }
    Ok((raw.into_iter().map(|(g, m)| (g, m / total)).collect(), dropped))
}

/// `τ̂(k) = Σ_g ω_g(k) τ̂_g(k)` with an influence-function standard error
/// that treats the weights as fixed.
pub fn aggregate_event_time(table: &GattTable, scheme: &AggregationScheme, k: i64) -> Result<EventAggregate> {
    let (weights, dropped) = aggregation_weights(table, scheme, k)?;
    let mut estimate = 0.0;
    let mut influence = vec![0.0; table.n];
    for (&g, &w) in &weights {
        let e = table.get(g, k).expect("weighted cohort has a cell");
        estimate += w * e.estimate;
        for (a, b) in influence.iter_mut().zip(&e.influence) {
            *a += w * b;
        }
    }
    let se = influence.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(EventAggregate { k, estimate, se, weights, dropped, scheme: scheme.label().into(), influence })
}

/// Linear combination `Σ c_{g,t} GATT(g,t)` over table cells, with its
/// standard error and influence vector.
pub fn linear_combination(table: &GattTable, coefs: &BTreeMap<(u32, u32), f64>) -> Result<(f64, f64, Vec<f64>)> {
    let mut est = 0.0;
    let mut influence = vec![0.0; table.n];
    for (&(g, t), &c) in coefs {
        let e = table
            .entries
            .get(&(g, t))
            .ok_or_else(|| Error::NoCohortsAtHorizon { horizons: vec![t as i64 - g as i64] })?;
        est += c * e.estimate;
        for (a, b) in influence.iter_mut().zip(&e.influence) {
            *a += c * b;
        }
    }
    let se = influence.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok((est, se, influence))
}

/// `k,estimate,se,scheme`.
pub fn write_aggregate_csv<W: Write>(out: W, rows: &[EventAggregate]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["k", "estimate", "se", "scheme"])?;
    for r in rows {
        w.write_record([r.k.to_string(), format!("{:.12e}", r.estimate), format!("{:.12e}", r.se), r.scheme.clone()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImputationResult {
    /// `τ̂^imp(k)` for each non-negative window horizon with treated cells.
    pub effects: BTreeMap<i64, f64>,
    pub counts: BTreeMap<i64, usize>,
    /// Mean imputed residual per cohort and horizon.
    pub cohort_effects: BTreeMap<(u32, i64), f64>,
    /// Covariate slopes of the untreated-outcome model.
    pub gamma: Vec<f64>,
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, a: usize) -> usize {
        let mut r = a;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = a;
        while self.0[c] != r {
            let next = self.0[c];
            self.0[c] = r;
            c = next;
        }
        r
    }
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Imputation event study: fit `a_i + b_t + X'γ` on untreated observed
/// cells, impute untreated outcomes on treated cells and average the
/// residuals by event time.
pub fn imputation_event_study(panel: &Panel, window: &EventWindow) -> Result<ImputationResult> {
    let (n, tl) = (panel.n(), panel.periods() as usize);
    let untreated: Vec<bool> = (0..n * tl)
        .map(|idx| {
            let (i, t) = (idx / tl, (idx % tl) as u32 + 1);
            panel.observed(i, t) && !panel.d(i, t)
        })
        .collect();

    // Every unit and period must sit in one connected untreated component.
    let mut uf = UnionFind((0..n + tl).collect());
    for (idx, &u) in untreated.iter().enumerate() {
        if u {
            uf.union(idx / tl, n + idx % tl);
        }
    }
    for i in 0..n {
        if !untreated[i * tl..(i + 1) * tl].iter().any(|&u| u) {
            return Err(Error::DisconnectedUntreatedSample(format!("unit {} has no untreated cell", panel.unit_ids()[i])));
        }
    }
    for s in 0..tl {
        if !(0..n).any(|i| untreated[i * tl + s]) {
            return Err(Error::DisconnectedUntreatedSample(format!("period {} has no untreated cell", s + 1)));
        }
    }
    let root = uf.find(0);
    if (1..n + tl).any(|v| uf.find(v) != root) {
        return Err(Error::DisconnectedUntreatedSample("unit and period effects split into several components".into()));
    }

    // Covariate slopes by partialling out both effects on the untreated mask.
    let dx = panel.d_x();
    let mut gamma = vec![0.0; dx];
    if dx > 0 {
        let y_dm = twoway_demean(panel.outcomes(), &untreated, n, tl, DEMEAN_TOL)?;
        let mut x_dm = Vec::with_capacity(dx);
        for c in 0..dx {
            let col: Vec<f64> = (0..n * tl).map(|idx| panel.x(idx / tl, (idx % tl) as u32 + 1)[c]).collect();
            x_dm.push(twoway_demean(&col, &untreated, n, tl, DEMEAN_TOL)?);
        }
        let cells: Vec<usize> = (0..n * tl).filter(|&idx| untreated[idx]).collect();
        let xm = DMatrix::from_fn(cells.len(), dx, |r, c| x_dm[c][cells[r]]);
        let ym = DVector::from_iterator(cells.len(), cells.iter().map(|&idx| y_dm[idx]));
        gamma = least_squares(&xm, &ym)?.coefficients.iter().copied().collect();
    }
    let xg = |i: usize, t: u32| -> f64 { panel.x(i, t).iter().zip(&gamma).map(|(a, b)| a * b).sum() };

    // Unit and period effects by Gauss-Seidel on the untreated residual.
    let resid: Vec<f64> = (0..n * tl)
        .map(|idx| {
            let (i, t) = (idx / tl, (idx % tl) as u32 + 1);
            if untreated[idx] { panel.y(i, t) - xg(i, t) } else { 0.0 }
        })
        .collect();
    let row_cnt: Vec<f64> = (0..n).map(|i| untreated[i * tl..(i + 1) * tl].iter().filter(|&&u| u).count() as f64).collect();
    let col_cnt: Vec<f64> = (0..tl).map(|s| (0..n).filter(|&i| untreated[i * tl + s]).count() as f64).collect();
    let scale = resid.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; tl];
    let mut converged = false;
    for _ in 0..crate::regression::demean::DEMEAN_MAX_ITER {
        let mut change: f64 = 0.0;
        for i in 0..n {
            let s: f64 = (0..tl).filter(|&s| untreated[i * tl + s]).map(|s| resid[i * tl + s] - b[s]).sum();
            let v = s / row_cnt[i];
            change = change.max((v - a[i]).abs());
            a[i] = v;
        }
        for s in 0..tl {
            let sum: f64 = (0..n).filter(|&i| untreated[i * tl + s]).map(|i| resid[i * tl + s] - a[i]).sum();
            let v = sum / col_cnt[s];
            change = change.max((v - b[s]).abs());
            b[s] = v;
        }
        if change < 1e-2 * DEMEAN_TOL * scale {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "imputation fixed effects".into(),
            iterations: crate::regression::demean::DEMEAN_MAX_ITER,
        });
    }

    let mut sums: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
    let mut cohort_sums: BTreeMap<(u32, i64), (f64, usize)> = BTreeMap::new();
    for i in 0..n {
        let Some(g) = panel.cohort(i).adoption() else { continue };
        for t in g..=panel.periods() {
            let k = t as i64 - g as i64;
            if !panel.observed(i, t) || !window.contains(k) {
                continue;
            }
            let r = panel.y(i, t) - (a[i] + b[t as usize - 1] + xg(i, t));
            let e = sums.entry(k).or_insert((0.0, 0));
            e.0 += r;
            e.1 += 1;
            let c = cohort_sums.entry((g, k)).or_insert((0.0, 0));
            c.0 += r;
            c.1 += 1;
        }
    }
    Ok(ImputationResult {
        effects: sums.iter().map(|(&k, &(s, c))| (k, s / c as f64)).collect(),
        counts: sums.iter().map(|(&k, &(_, c))| (k, c)).collect(),
        cohort_effects: cohort_sums.into_iter().map(|(key, (s, c))| (key, s / c as f64)).collect(),
        gamma,
    })
}

/// Running sums `Δ(k) = Σ_{j=0..k} τ(j)` over the non-negative horizons of
/// a path, which must run contiguously from 0.
pub fn cumulative_effects(path: &BTreeMap<i64, f64>) -> Result<BTreeMap<i64, f64>> {
    let mut out = BTreeMap::new();
    let mut acc = 0.0;
    let mut expect = 0;
    for (&k, &v) in path.range(0..) {
        if k != expect {
            return Err(Error::GapInPath { k: expect });
        }
        acc += v;
        out.insert(k, acc);
        expect += 1;
    }
    if out.is_empty() {
        return Err(Error::GapInPath { k: 0 });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::twfe::tests::panel_of;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Noiseless additive panel with effect `tau(g, k)` on treated cells.
    fn additive(periods: u32, cohorts: Vec<Cohort>, tau: impl Fn(u32, i64) -> f64, seed: u64) -> Panel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit: Vec<f64> = cohorts.iter().map(|_| rng.random_range(-2.0..2.0)).collect();
        let time: Vec<f64> = (0..periods).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut y = Vec::new();
        for (i, c) in cohorts.iter().enumerate() {
            for t in 1..=periods {
                let eff = match c.adoption() {
                    Some(g) if t >= g => tau(g, t as i64 - g as i64),
                    _ => 0.0,
                };
                y.push(unit[i] + time[t as usize - 1] + eff);
            }
        }
        panel_of(periods, cohorts, y)
    }

    fn mc81_cohorts(per: usize) -> Vec<Cohort> {
        [Cohort::At(4), Cohort::At(6), Cohort::At(8), Cohort::At(10), Cohort::Never]
            .iter()
            .flat_map(|&c| std::iter::repeat(c).take(per))
            .collect()
    }

    #[test]
    fn control_sets() {
        let p = panel_of(3, vec![Cohort::At(2), Cohort::At(3), Cohort::Never], vec![0.0; 9]);
        assert_eq!(control_set(&p, 2, 2, ControlKind::NotYetTreated).unwrap(), vec![1, 2]);
        assert_eq!(control_set(&p, 2, 2, ControlKind::NeverTreated).unwrap(), vec![2]);
        let q = panel_of(12, mc81_cohorts(1), vec![0.0; 60]);
        assert_eq!(control_set(&q, 4, 11, ControlKind::NotYetTreated).unwrap(), vec![4]);
        let r = panel_of(3, vec![Cohort::At(2)], vec![0.0; 3]);
        assert_eq!(control_set(&r, 2, 2, ControlKind::NeverTreated), Err(Error::EmptyControlSet { g: 2, t: 2 }));
    }

    #[test]
    fn two_by_two_cell() {
        let p = panel_of(2, vec![Cohort::At(2), Cohort::Never], vec![1.0, 3.0, 0.0, 1.0]);
        let e = gatt_cell(&p, 2, 2, ControlKind::NeverTreated, false).unwrap();
        assert!((e.estimate - 1.0).abs() < 1e-15);
        assert_eq!((e.n_treated, e.n_control), (1, 1));
    }

    #[test]
    fn noiseless_oracle_recovery() {
        let tau = |g: u32, k: i64| 0.3 * g as f64 + 0.1 * k as f64 * k as f64;
        let p = additive(12, mc81_cohorts(5), tau, 3);
        for kind in [ControlKind::NeverTreated, ControlKind::NotYetTreated] {
            let table = gatt_table(&p, kind, false).unwrap();
            for e in table.entries.values() {
                assert!((e.estimate - tau(e.g, e.k)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn influence_se_matches_two_sample_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cohorts: Vec<Cohort> = (0..40).map(|i| if i < 15 { Cohort::At(2) } else { Cohort::Never }).collect();
        let y: Vec<f64> = (0..80).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = panel_of(2, cohorts, y.clone());
        let e = gatt_cell(&p, 2, 2, ControlKind::NeverTreated, false).unwrap();
        let dy: Vec<f64> = (0..40).map(|i| y[2 * i + 1] - y[2 * i]).collect();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64
        };
        let oracle = (var(&dy[..15]) / 15.0 + var(&dy[15..]) / 25.0).sqrt();
        assert!((e.se - oracle).abs() < 1e-12);
    }

    #[test]
    fn propensity_reweighting_balances_discrete_covariate() {
        // Treated units sit mostly at x = 1; the control trend differs by x.
        let mut cohorts = Vec::new();
        let mut x = Vec::new();
        let mut y = Vec::new();
        for (count, g, xv) in [(30, Cohort::At(2), 1.0), (10, Cohort::At(2), 0.0), (20, Cohort::Never, 1.0), (40, Cohort::Never, 0.0)] {
            for _ in 0..count {
                cohorts.push(g);
                x.extend([xv, xv]);
                let trend = 2.0 * xv;
                let eff = if g == Cohort::At(2) { 0.5 } else { 0.0 };
                y.extend([0.0, trend + eff]);
            }
        }
        let p = Panel::from_arrays(2, cohorts, y, 1, x, None, None).unwrap();
        let plain = gatt_cell(&p, 2, 2, ControlKind::NeverTreated, false).unwrap();
        let ipw = gatt_cell(&p, 2, 2, ControlKind::NeverTreated, true).unwrap();
        assert!((plain.estimate - 0.5).abs() > 0.1);
        assert!((ipw.estimate - 0.5).abs() < 1e-6);
    }

    #[test]
    fn overlap_failure_is_reported() {
        let cohorts = vec![Cohort::At(2), Cohort::At(2), Cohort::Never, Cohort::Never];
        let x = vec![5.0, 5.0, 5.0, 5.0, -5.0, -5.0, -5.0, -5.0];
        let p = Panel::from_arrays(2, cohorts, vec![0.0; 8], 1, x, None, None).unwrap();
        assert_eq!(
            gatt_cell(&p, 2, 2, ControlKind::NeverTreated, true),
            Err(Error::PropensityOverlapFailure { g: 2, t: 2 })
        );
    }

    #[test]
    fn attrition_drops_units_from_cells() {
        let y = vec![0.0, 1.0, 2.0, 0.0, 5.0, 9.0, 0.0, 0.0, 0.0];
        let mut obs = vec![true; 9];
        obs[4] = false;
        let p = Panel::from_arrays(3, vec![Cohort::At(2), Cohort::At(2), Cohort::Never], y, 0, vec![], None, Some(obs)).unwrap();
        let e = gatt_cell(&p, 2, 2, ControlKind::NeverTreated, false).unwrap();
        assert_eq!(e.n_treated, 1);
        assert!((e.estimate - 1.0).abs() < 1e-15);
        let e3 = gatt_cell(&p, 2, 3, ControlKind::NeverTreated, false).unwrap();
        assert_eq!(e3.n_treated, 2);
    }

    #[test]
    fn sample_share_weights() {
        let mut cohorts = vec![Cohort::At(2); 100];
        cohorts.extend(vec![Cohort::At(3); 300]);
        cohorts.extend(vec![Cohort::Never; 10]);
        let p = additive(4, cohorts, |g, _| g as f64, 1);
        let table = gatt_table(&p, ControlKind::NeverTreated, false).unwrap();
        let agg = aggregate_event_time(&table, &AggregationScheme::SampleShare, 0).unwrap();
        assert!((agg.weights[&2] - 0.25).abs() < 1e-15 && (agg.weights[&3] - 0.75).abs() < 1e-15);
        assert!((agg.estimate - (0.25 * 2.0 + 0.75 * 3.0)).abs() < 1e-10);
        // Horizon 2 only has cohort 2.
        let single = aggregate_event_time(&table, &AggregationScheme::SampleShare, 2).unwrap();
        assert_eq!(single.estimate, table.get(2, 2).unwrap().estimate);
        assert_eq!(
            aggregate_event_time(&table, &AggregationScheme::SampleShare, 5),
            Err(Error::NoCohortsAtHorizon { horizons: vec![5] })
        );
        assert_eq!(aggregate_event_time(&table, &AggregationScheme::Exposure, 0), Err(Error::MissingExposure));
    }

    #[test]
    fn pooled_target_arithmetic() {
        let h = [0.8, 1.0, 1.2, 1.4];
        let m = [0.5, 0.75, 1.0, 1.0];
        let theta: f64 = h.iter().map(|hg| m.iter().map(|ml| 0.25 * 0.25 * hg * ml).sum::<f64>()).sum();
        assert!((theta - 0.89375).abs() < 1e-12);
        assert!((theta - 1.1 * 0.8125).abs() < 1e-12);
    }

    #[test]
    fn imputation_exact_on_additive_panel() {
        let tau = |g: u32, k: i64| g as f64 * 0.1 + k as f64;
        let cohorts = mc81_cohorts(4);
        let p = additive(12, cohorts, tau, 6);
        let res = imputation_event_study(&p, &EventWindow::range(-3, 8, -1).unwrap()).unwrap();
        for (&k, &v) in &res.effects {
            let gs: Vec<u32> = [4u32, 6, 8, 10].into_iter().filter(|g| g + k as u32 <= 12).collect();
            let truth = gs.iter().map(|&g| tau(g, k)).sum::<f64>() / gs.len() as f64;
            assert!((v - truth).abs() < 1e-9, "k={k}");
        }
    }

    #[test]
    fn imputation_with_covariate() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cohorts = mc81_cohorts(3);
        let n = cohorts.len();
        let x: Vec<f64> = (0..n * 12).map(|_| rng.random_range(-1.0..1.0)).collect();
        let base = additive(12, cohorts.clone(), |_, _| 0.7, 2);
        let y: Vec<f64> = base.outcomes().iter().zip(&x).map(|(y, x)| y + 1.5 * x).collect();
        let p = Panel::from_arrays(12, cohorts, y, 1, x, None, None).unwrap();
        let res = imputation_event_study(&p, &EventWindow::range(0, 8, 0).unwrap()).unwrap();
        assert!((res.gamma[0] - 1.5).abs() < 1e-9);
        assert!(res.effects.values().all(|v| (v - 0.7).abs() < 1e-9));
    }

    #[test]
    fn imputation_needs_untreated_cells() {
        let p = panel_of(3, vec![Cohort::At(1), Cohort::At(1)], vec![0.0; 6]);
        assert!(matches!(
            imputation_event_study(&p, &EventWindow::range(-1, 2, -1).unwrap()),
            Err(Error::DisconnectedUntreatedSample(_))
        ));
    }

    #[test]
    fn cumulative_paths() {
        let path: BTreeMap<i64, f64> = [(0, 0.5), (1, 0.75), (2, 1.0)].into_iter().collect();
        let c = cumulative_effects(&path).unwrap();
        assert_eq!(c.values().copied().collect::<Vec<_>>(), vec![0.5, 1.25, 2.25]);
        let zeros: BTreeMap<i64, f64> = (0..4).map(|k| (k, 0.0)).collect();
        assert!(cumulative_effects(&zeros).unwrap().values().all(|&v| v == 0.0));
        let one: BTreeMap<i64, f64> = [(-1, 9.0), (0, 0.3)].into_iter().collect();
        assert_eq!(cumulative_effects(&one).unwrap()[&0], 0.3);
        let gap: BTreeMap<i64, f64> = [(0, 1.0), (2, 1.0)].into_iter().collect();
        assert_eq!(cumulative_effects(&gap), Err(Error::GapInPath { k: 1 }));
    }

    #[test]
    fn placebo_cells_vanish_under_parallel_trends() {
        let p = additive(12, mc81_cohorts(3), |_, _| 1.0, 9);
        let e = placebo_cell(&p, 8, 5).unwrap();
        assert!(e.estimate.abs() < 1e-12);
        assert_eq!(e.k, -3);
    }

    #[test]
    fn gatt_csv_header() {
        let p = additive(4, vec![Cohort::At(2), Cohort::Never], |_, _| 1.0, 0);
        let t = gatt_table(&p, ControlKind::NeverTreated, false).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("g,t,k,estimate,se,n_treated,n_control,control_kind\n"));
    }

    fn arb_table() -> impl Strategy<Value = (Vec<usize>, u64)> {
        (prop::collection::vec(1usize..30, 4), any::<u64>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn aggregation_is_convex_and_local((sizes, seed) in arb_table()) {
            let mut cohorts = Vec::new();
            for (c, &s) in [Cohort::At(3), Cohort::At(4), Cohort::At(5), Cohort::Never].iter().zip(&sizes) {
                cohorts.extend(std::iter::repeat(*c).take(s));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = cohorts.len();
            let y: Vec<f64> = (0..n * 6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let exposure: Vec<f64> = vec![2.5; n];
            let p = Panel::from_arrays(6, cohorts, y, 0, vec![], Some(exposure), None).unwrap();
            let table = gatt_table(&p, ControlKind::NeverTreated, false).unwrap();
            for k in 0..=3i64 {
                let agg = aggregate_event_time(&table, &AggregationScheme::SampleShare, k).unwrap();
                let total: f64 = agg.weights.values().sum();
                prop_assert!((total - 1.0).abs() < 1e-10);
                prop_assert!(agg.weights.values().all(|&w| w >= 0.0));
                let ests: Vec<f64> = agg.weights.keys().map(|&g| table.get(g, k).unwrap().estimate).collect();
                let lo = ests.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = ests.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(agg.estimate >= lo - 1e-12 && agg.estimate <= hi + 1e-12);
                let exp = aggregate_event_time(&table, &AggregationScheme::Exposure, k).unwrap();
                prop_assert_eq!(&exp.weights, &agg.weights);
                // Perturbing other horizons leaves this one bit-identical.
                let mut other = table.clone();
                for e in other.entries.values_mut() {
                    if e.k != k {
                        e.estimate += 100.0;
                    }
                }
                let again = aggregate_event_time(&other, &AggregationScheme::SampleShare, k).unwrap();
                prop_assert_eq!(again.estimate.to_bits(), agg.estimate.to_bits());
            }
        }
    }
}

//! Restricted violations of parallel trends: identified sets over deviation
//! paths, bias-bound intervals, calibration from pre-period coefficients,
//! breakdown frontiers and admissibility maps.
//!
//! A deviation path `δ_{g,t}` is indexed by cohort and calendar period. The
//! curvature class bounds pre-period levels by `(1+Δ)B` and post-period
//! second differences by `Γ`. When a cohort has fewer than two periods before
//! its first post period, the missing levels continue the earliest available
//! level flat; a cohort treated in period 1 gets one virtual pre level, itself
//! bounded by `(1+Δ)B`. This pins the post-period path to the pre-period box
//! and keeps both optimisation problems bounded.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::regression::{solve_lp, Direction, LpProblem, Sense};

/// Admissible coverage floor for a sensitivity cell.
pub const COVERAGE_FLOOR: f64 = 0.90;
/// Admissible length cap, relative to the baseline cell.
pub const LENGTH_CAP: f64 = 2.5;
pub const EPS_TAU: f64 = 1e-6;
pub const KAPPA_B_GRID: [f64; 5] = [0.0, 0.25, 0.5, 1.0, 2.0];
/// Drift grid in percent of the baseline effect per period.
pub const GAMMA_GRID_PERCENT: [f64; 5] = [0.0, 1.0, 2.0, 5.0, 10.0];
/// Drift grid in outcome units per period, as used by the simulation frontier.
pub const GAMMA_GRID_LEVEL: [f64; 4] = [0.0, 0.05, 0.10, 0.15];
pub const C_R_GRID: [f64; 4] = [0.0, 0.5, 1.0, 2.0];
const HOLDOUT_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RestrictionKind {
    /// Pre levels in `±(1+Δ)B`, post second differences in `±Γ`.
    CurvatureBounded,
    /// Every cell in `±(1+Δ)B`.
    LevelBound,
    /// Scalar worst-case bias `(1+Δ)B + (t0−2)Γ` per unit of coefficient mass.
    BiasBoundScalar { t0: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestrictionClass {
    pub kind: RestrictionKind,
    pub b: f64,
    pub gamma: f64,
    pub delta_r: f64,
}

impl RestrictionClass {
    pub fn new(kind: RestrictionKind, b: f64, gamma: f64, delta_r: f64) -> Result<Self> {
        for (name, v) in [("B", b), ("Gamma", gamma), ("DeltaR", delta_r)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(Self { kind, b, gamma, delta_r })
    }

    pub fn curvature(b: f64, gamma: f64, delta_r: f64) -> Result<Self> {
        Self::new(RestrictionKind::CurvatureBounded, b, gamma, delta_r)
    }

    /// Bound on pre-period levels.
    pub fn level(&self) -> f64 {
        (1.0 + self.delta_r) * self.b
    }
}

/// Linear map from deviation cells `(g, t)` to the target.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DeviationMap {
    pub periods: u32,
    pub coefficients: BTreeMap<(u32, u32), f64>,
}

impl DeviationMap {
    pub fn new(periods: u32) -> Self {
        Self { periods, coefficients: BTreeMap::new() }
    }

    pub fn with(mut self, g: u32, t: u32, c: f64) -> Self {
        *self.coefficients.entry((g, t)).or_insert(0.0) += c;
        self
    }

    pub fn cohorts(&self) -> Vec<u32> {
        let mut g: Vec<u32> = self.coefficients.keys().map(|k| k.0).collect();
        g.dedup();
        g
    }

    fn validate(&self) -> Result<()> {
        if self.periods == 0 {
            return Err(Error::InvalidInput("deviation map needs at least one period".into()));
        }
        for (&(g, t), c) in &self.coefficients {
            if g == 0 || t == 0 || t > self.periods || !c.is_finite() {
                return Err(Error::InvalidInput(format!("bad deviation cell ({g},{t})")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IdentifiedSet {
    pub lower: f64,
    pub upper: f64,
    /// Deviation paths attaining the endpoints.
    pub lower_path: BTreeMap<(u32, u32), f64>,
    pub upper_path: BTreeMap<(u32, u32), f64>,
}

impl IdentifiedSet {
    pub fn contains(&self, v: f64) -> bool {
        self.lower <= v && v <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Variable layout of the curvature LP: one block of `periods` levels per
/// cohort, plus a virtual pre level for cohorts treated in period 1.
struct Layout {
    cohorts: Vec<u32>,
    periods: usize,
    virtual_of: BTreeMap<u32, usize>,
    nvars: usize,
}

impl Layout {
    fn new(map: &DeviationMap) -> Self {
        let cohorts = map.cohorts();
        let periods = map.periods as usize;
        let mut nvars = cohorts.len() * periods;
        let mut virtual_of = BTreeMap::new();
        for &g in &cohorts {
            if g == 1 {
                virtual_of.insert(g, nvars);
                nvars += 1;
            }
        }
        Self { cohorts, periods, virtual_of, nvars }
    }

    fn var(&self, ci: usize, t: u32) -> usize {
        ci * self.periods + (t as usize - 1)
    }

    /// Variable holding the level at period `s` of cohort `ci`, continuing
    /// the earliest level flat when `s` precedes the sample.
    fn level(&self, ci: usize, s: i64) -> usize {
        let g = self.cohorts[ci];
        if s >= 1 {
            self.var(ci, s as u32)
        } else if let Some(&v) = self.virtual_of.get(&g) {
            v
        } else {
            self.var(ci, 1)
        }
    }
}

fn curvature_problem(map: &DeviationMap, rc: &RestrictionClass, layout: &Layout) -> LpProblem {
    let lvl = rc.level();
    let mut bounds = vec![(f64::NEG_INFINITY, f64::INFINITY); layout.nvars];
    let mut obj = vec![0.0; layout.nvars];
    for (&(g, t), &c) in &map.coefficients {
        let ci = layout.cohorts.binary_search(&g).unwrap();
        obj[layout.var(ci, t)] += c;
    }
    for &v in layout.virtual_of.values() {
        bounds[v] = (-lvl, lvl);
    }
    let mut lp = LpProblem::new(obj, vec![]);
    for (ci, &g) in layout.cohorts.iter().enumerate() {
        for t in 1..=map.periods {
            if t < g {
                bounds[layout.var(ci, t)] = (-lvl, lvl);
                continue;
            }
            let mut row = vec![0.0; layout.nvars];
            let s = t as i64;
            row[layout.level(ci, s)] += 1.0;
            row[layout.level(ci, s - 1)] -= 2.0;
            row[layout.level(ci, s - 2)] += 1.0;
            lp.add(row.clone(), Sense::Le, rc.gamma);
            lp.add(row, Sense::Ge, -rc.gamma);
        }
    }
    lp.bounds = bounds;
    lp
}

fn path_of(layout: &Layout, x: &[f64]) -> BTreeMap<(u32, u32), f64> {
    let mut out = BTreeMap::new();
    for (ci, &g) in layout.cohorts.iter().enumerate() {
        for t in 1..=layout.periods as u32 {
            out.insert((g, t), x[layout.var(ci, t)]);
        }
    }
    out
}

/// Sharp bounds on `θ̂ + Σ c_{g,t} δ_{g,t}` over the restriction class.
pub fn identified_set(theta_hat: f64, map: &DeviationMap, rc: &RestrictionClass) -> Result<IdentifiedSet> {
    map.validate()?;
    match rc.kind {
        RestrictionKind::CurvatureBounded => {
            let layout = Layout::new(map);
            if layout.nvars == 0 {
                return Ok(IdentifiedSet { lower: theta_hat, upper: theta_hat, lower_path: BTreeMap::new(), upper_path: BTreeMap::new() });
            }
            let lp = curvature_problem(map, rc, &layout);
            let lo = solve_lp(&lp, Direction::Minimize)?;
            let hi = solve_lp(&lp, Direction::Maximize)?;
            Ok(IdentifiedSet {
                lower: theta_hat + lo.value,
                upper: theta_hat + hi.value,
                lower_path: path_of(&layout, &lo.x),
                upper_path: path_of(&layout, &hi.x),
            })
        }
        RestrictionKind::LevelBound | RestrictionKind::BiasBoundScalar { .. } => {
            let r = match rc.kind {
                RestrictionKind::BiasBoundScalar { t0 } => bias_bound(rc.b, rc.gamma, rc.delta_r, t0),
                _ => rc.level(),
            };
            let mut lower_path = BTreeMap::new();
            let mut upper_path = BTreeMap::new();
            let mut mass = 0.0;
            for (&cell, &c) in &map.coefficients {
                mass += c.abs();
                let s = if c >= 0.0 { r } else { -r };
                lower_path.insert(cell, -s);
                upper_path.insert(cell, s);
            }
            Ok(IdentifiedSet { lower: theta_hat - r * mass, upper: theta_hat + r * mass, lower_path, upper_path })
        }
    }
}

/// Worst-case bias `(1+Δ)B + (t0−2)Γ` at the monitored horizon `t0`.
pub fn bias_bound(b: f64, gamma: f64, delta_r: f64, t0: u32) -> f64 {
    (1.0 + delta_r) * b + (t0 as f64 - 2.0) * gamma
}

/// Two-sided normal critical value; exactly 1.96 at the 5% level.
pub fn critical_value(alpha: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::InvalidInput(format!("alpha must lie in (0,1), got {alpha}")));
    }
    if (alpha - 0.05).abs() < 1e-15 {
        return Ok(1.96);
    }
    Ok(Normal::standard().inverse_cdf(1.0 - alpha / 2.0))
}

/// `θ̂ ± (z·se + bound)`.
pub fn robust_interval(theta_hat: f64, se: f64, bound: f64, alpha: f64) -> Result<(f64, f64)> {
    if !(se >= 0.0) || !(bound >= 0.0) {
        return Err(Error::InvalidInput("se and bound must be nonnegative".into()));
    }
    let h = critical_value(alpha)? * se + bound;
    Ok((theta_hat - h, theta_hat + h))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationOutput {
    pub a_pre: f64,
    pub m_pre: f64,
    pub drift: f64,
    pub b_hat: f64,
    /// Percent of the baseline effect per period.
    pub gamma_hat: f64,
    pub delta_hat: f64,
    pub kappa_b: f64,
    pub c_r: f64,
    pub eps_tau: f64,
    /// `(κ_B, B)` over the default grid.
    pub b_grid: Vec<(f64, f64)>,
    /// `(c_R, Δ)` over the default grid.
    pub delta_grid: Vec<(f64, f64)>,
    pub gamma_grid: Vec<f64>,
}

impl CalibrationOutput {
    /// `Γ̂` converted back to outcome units per period.
    pub fn gamma_level(&self, tau_hat: f64) -> f64 {
        self.gamma_hat / 100.0 * (tau_hat.abs() + self.eps_tau)
    }
}

/// Calibrates `(B, Γ, Δ)` from pre-period coefficients `ℓ ↦ (β̂, σ̂)`.
pub fn calibrate(pre: &BTreeMap<i64, (f64, f64)>, tau_hat: f64, kappa_b: f64, c_r: f64, eps_tau: f64) -> Result<CalibrationOutput> {
    if pre.len() < 2 {
        return Err(Error::TooFewPrePeriods { got: pre.len() });
    }
    if !(eps_tau > 0.0) || !(kappa_b >= 0.0) || !(c_r >= 0.0) || !tau_hat.is_finite() {
        return Err(Error::InvalidInput("calibration needs eps_tau > 0 and nonnegative multipliers".into()));
    }
    let (mut a, mut m, mut d) = (0.0f64, 0.0f64, 0.0f64);
    for (&l, &(beta, sigma)) in pre {
        if !(sigma > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidInput(format!("pre coefficient {l} needs finite beta and positive se")));
        }
        a = a.max(beta.abs());
        m = m.max((beta / sigma).abs());
        if let Some(&(prev, _)) = pre.get(&(l - 1)) {
            d = d.max((beta - prev).abs());
        }
    }
    Ok(CalibrationOutput {
        a_pre: a,
        m_pre: m,
        drift: d,
        b_hat: kappa_b * a,
        gamma_hat: 100.0 * d / (tau_hat.abs() + eps_tau),
        delta_hat: c_r * a,
        kappa_b,
        c_r,
        eps_tau,
        b_grid: KAPPA_B_GRID.iter().map(|&k| (k, k * a)).collect(),
        delta_grid: C_R_GRID.iter().map(|&c| (c, c * a)).collect(),
        gamma_grid: GAMMA_GRID_PERCENT.to_vec(),
    })
}

/// Type-7 sample quantile.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let h = (v.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(v.len() - 1);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldoutResult {
    pub b: f64,
    pub threshold: f64,
    /// False when no grid value met the threshold; `b` is then the grid max.
    pub feasible: bool,
    /// False when the held-out discrepancy increased somewhere along the grid.
    pub monotone: bool,
    pub discrepancies: Vec<(f64, f64)>,
}

/// Smallest grid `b` whose held-out coefficients `β̂_ℓ(b)` stay within the
/// 95th percentile of the reference magnitudes.
pub fn holdout_b(reference: &[f64], held_out: &dyn Fn(f64) -> Vec<f64>, grid: &[f64]) -> Result<HoldoutResult> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if reference.is_empty() {
        return Err(Error::InvalidInput("holdout reference split is empty".into()));
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput("grid must be strictly increasing".into()));
    }
    let abs: Vec<f64> = reference.iter().map(|b| b.abs()).collect();
    let threshold = quantile(&abs, 0.95);
    let discrepancies: Vec<(f64, f64)> =
        grid.iter().map(|&b| (b, held_out(b).iter().fold(0.0f64, |m, v| m.max(v.abs())))).collect();
    let monotone = discrepancies.windows(2).all(|w| w[1].1 <= w[0].1 + HOLDOUT_TOL);
    let hit = discrepancies.iter().find(|(_, g)| *g <= threshold + HOLDOUT_TOL);
    Ok(HoldoutResult {
        b: hit.map_or(*grid.last().unwrap(), |h| h.0),
        threshold,
        feasible: hit.is_some(),
        monotone,
        discrepancies,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Breakdown {
    pub value: f64,
    pub capped: bool,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::EmptyGrid);
    }
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidInput("grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Smallest grid `Γ` at which the interval for `(B, Γ, Δ)` covers zero.
pub fn breakdown_frontier(interval: &dyn Fn(f64, f64, f64) -> (f64, f64), b: f64, delta_r: f64, gamma_grid: &[f64]) -> Result<Breakdown> {
    check_grid(gamma_grid)?;
    for &g in gamma_grid {
        let (lo, hi) = interval(b, g, delta_r);
        if lo <= 0.0 && 0.0 <= hi {
            return Ok(Breakdown { value: g, capped: false });
        }
    }
    Ok(Breakdown { value: *gamma_grid.last().unwrap(), capped: true })
}

/// First crossing of `threshold` by a monitored curve `(x, y)`, linearly
/// interpolated between the bracketing points.
pub fn monitored_crossing(points: &[(f64, f64)], threshold: f64) -> Result<Breakdown> {
    check_grid(&points.iter().map(|p| p.0).collect::<Vec<_>>())?;
    match points.iter().position(|p| p.1 >= threshold) {
        None => Ok(Breakdown { value: points.last().unwrap().0, capped: true }),
        Some(0) => Ok(Breakdown { value: points[0].0, capped: false }),
        Some(j) => {
            let ((x0, y0), (x1, y1)) = (points[j - 1], points[j]);
            Ok(Breakdown { value: x0 + (threshold - y0) * (x1 - x0) / (y1 - y0), capped: false })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FrontierRow {
    pub b: f64,
    pub delta_r: f64,
    pub gamma_star: f64,
    pub capped: bool,
}

pub fn write_frontier_csv<W: Write>(out: W, rows: &[FrontierRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["B", "DeltaR", "Gamma_star", "capped_flag"])?;
    for r in rows {
        w.write_record([fmt(r.b), fmt(r.delta_r), fmt(r.gamma_star), (r.capped as u8).to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v:.12e}")
}

/// One grid cell's summary feeding the admissibility map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionInput {
    pub b: f64,
    pub gamma: f64,
    pub delta_r: f64,
    pub coverage: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegionCell {
    pub b: f64,
    pub gamma: f64,
    pub delta_r: f64,
    pub admissible: bool,
    pub sign_stable: bool,
    pub length: f64,
}

/// Admissibility `Cov ≥ 0.90 ∧ Len ≤ 2.5·Len₀` and sign stability relative
/// to the `(0,0,0)` baseline cell.
pub fn sensitivity_region(cells: &[RegionInput]) -> Result<Vec<RegionCell>> {
    let base = cells
        .iter()
        .find(|c| c.b == 0.0 && c.gamma == 0.0 && c.delta_r == 0.0)
        .ok_or(Error::MissingBaseline)?;
    let len0 = base.upper - base.lower;
    let sign0 = (base.lower + base.upper).signum();
    Ok(cells
        .iter()
        .map(|c| {
            let length = c.upper - c.lower;
            let excludes = c.lower > 0.0 || c.upper < 0.0;
            RegionCell {
                b: c.b,
                gamma: c.gamma,
                delta_r: c.delta_r,
                admissible: c.coverage >= COVERAGE_FLOOR && length <= LENGTH_CAP * len0,
                sign_stable: excludes && (c.lower + c.upper).signum() == sign0,
                length,
            }
        })
        .collect())
}

pub fn write_region_csv<W: Write>(out: W, cells: &[RegionCell]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["B", "Gamma", "DeltaR", "admissible", "sign_stable", "length"])?;
    for c in cells {
        w.write_record([
            fmt(c.b),
            fmt(c.gamma),
            fmt(c.delta_r),
            (c.admissible as u8).to_string(),
            (c.sign_stable as u8).to_string(),
            fmt(c.length),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SelectionStep {
    pub b: f64,
    pub gamma: f64,
    pub delta_r: f64,
    pub placebo_rate: f64,
    pub holdout: f64,
    pub feasible: bool,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Selection {
    pub chosen: Option<(f64, f64, f64)>,
    pub trace: Vec<SelectionStep>,
}

fn normaliser(grid: &[f64]) -> f64 {
    let m = grid.iter().fold(0.0f64, |m, v| m.max(*v));
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Minimal grid triple with placebo rejection at most `alpha` and holdout
/// discrepancy at most `h_bar`. The objective weighs each coordinate equally
/// after dividing by its grid maximum; ties go to the lexicographically
/// smallest `(B, Γ, Δ)`.
pub fn select_minimal(
    b_grid: &[f64],
    gamma_grid: &[f64],
    delta_grid: &[f64],
    evaluate: &dyn Fn(f64, f64, f64) -> (f64, f64),
    alpha: f64,
    h_bar: f64,
) -> Result<Selection> {
    for g in [b_grid, gamma_grid, delta_grid] {
        check_grid(g)?;
    }
    let (nb, ng, nd) = (normaliser(b_grid), normaliser(gamma_grid), normaliser(delta_grid));
    let mut trace = vec![];
    let mut best: Option<(f64, (f64, f64, f64))> = None;
    for &b in b_grid {
        for &g in gamma_grid {
            for &d in delta_grid {
                let (placebo_rate, holdout) = evaluate(b, g, d);
                let feasible = placebo_rate <= alpha && holdout <= h_bar;
                let objective = b / nb + g / ng + d / nd;
                trace.push(SelectionStep { b, gamma: g, delta_r: d, placebo_rate, holdout, feasible, objective });
                if feasible && best.map_or(true, |(o, _)| objective < o - 1e-12) {
                    best = Some((objective, (b, g, d)));
                }
            }
        }
    }
    Ok(Selection { chosen: best.map(|b| b.1), trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bias_bound_examples() {
        assert!((bias_bound(0.5, 0.1, 0.25, 5) - 0.925).abs() < 1e-12);
        assert_eq!(bias_bound(0.0, 0.0, 0.0, 5), 0.0);
        assert_eq!(bias_bound(1.0, 0.0, 0.0, 5), 1.0);
    }

    #[test]
    fn robust_interval_examples() {
        let (lo, hi) = robust_interval(1.0, 0.1, 0.925, 0.05).unwrap();
        assert!((lo - (1.0 - 1.121)).abs() < 1e-12 && (hi - 2.121).abs() < 1e-12);
        let (lo, hi) = robust_interval(0.3, 0.2, 0.0, 0.05).unwrap();
        assert!((lo - (0.3 - 0.392)).abs() < 1e-12 && (hi - 0.692).abs() < 1e-12);
        assert!((critical_value(0.10).unwrap() - 1.6448536269514722).abs() < 1e-9);
        assert!(robust_interval(0.0, -1.0, 0.0, 0.05).is_err());
    }

    #[test]
    fn zero_se_matches_level_bound() {
        let map = DeviationMap::new(3).with(2, 3, 1.0);
        for b in [0.0, 0.2, 1.5] {
            let set = identified_set(0.7, &map, &RestrictionClass::new(RestrictionKind::LevelBound, b, 0.0, 0.0).unwrap()).unwrap();
            let (lo, hi) = robust_interval(0.7, 0.0, b, 0.05).unwrap();
            assert!((set.lower - lo).abs() < 1e-12 && (set.upper - hi).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_class_is_a_point() {
        let map = DeviationMap::new(5).with(3, 3, 0.6).with(3, 4, 0.4).with(4, 4, 1.0);
        let set = identified_set(2.0, &map, &RestrictionClass::curvature(0.0, 0.0, 0.0).unwrap()).unwrap();
        assert!((set.lower - 2.0).abs() < 1e-12 && (set.upper - 2.0).abs() < 1e-12);
    }

    /// Paths with zero pre levels are fixed by their second differences, so
    /// the optimum sits at a sign pattern of `±Γ` second differences.
    fn vertex_oracle(map: &DeviationMap, gamma: f64) -> (f64, f64) {
        let cohorts = map.cohorts();
        let t = map.periods;
        let total: u32 = cohorts.iter().map(|&g| t + 1 - g).sum();
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for mask in 0u32..(1 << total) {
            let mut bit = 0;
            let mut val = 0.0;
            for &g in &cohorts {
                let (mut prev2, mut prev1) = (0.0, 0.0);
                for s in g..=t {
                    let e = if mask >> bit & 1 == 1 { gamma } else { -gamma };
                    bit += 1;
                    let cur = 2.0 * prev1 - prev2 + e;
                    val += map.coefficients.get(&(g, s)).copied().unwrap_or(0.0) * cur;
                    prev2 = prev1;
                    prev1 = cur;
                }
            }
            lo = lo.min(val);
            hi = hi.max(val);
        }
        (lo, hi)
    }

    #[test]
    fn curvature_toy_matches_vertex_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let mut map = DeviationMap::new(4);
            for g in 1..=4u32 {
                for t in g..=4 {
                    map = map.with(g, t, rng.random_range(-1.0..1.0));
                }
            }
            let set = identified_set(0.0, &map, &RestrictionClass::curvature(0.0, 0.1, 0.0).unwrap()).unwrap();
            let (lo, hi) = vertex_oracle(&map, 0.1);
            assert!((set.lower - lo).abs() < 1e-9, "{} vs {lo}", set.lower);
            assert!((set.upper - hi).abs() < 1e-9, "{} vs {hi}", set.upper);
        }
    }

    #[test]
    fn witnesses_attain_endpoints() {
        let map = DeviationMap::new(5).with(3, 4, 0.5).with(3, 5, 0.5).with(2, 2, -1.0).with(1, 3, 0.3);
        let rc = RestrictionClass::curvature(0.2, 0.05, 0.5).unwrap();
        let set = identified_set(1.0, &map, &rc).unwrap();
        let eval = |p: &BTreeMap<(u32, u32), f64>| 1.0 + map.coefficients.iter().map(|(k, c)| c * p[k]).sum::<f64>();
        assert!((eval(&set.lower_path) - set.lower).abs() < 1e-9);
        assert!((eval(&set.upper_path) - set.upper).abs() < 1e-9);
        for (&(g, t), &v) in &set.upper_path {
            if t < g {
                assert!(v.abs() <= rc.level() + 1e-9);
            }
        }
        let neg = DeviationMap { periods: 5, coefficients: map.coefficients.iter().map(|(k, c)| (*k, -c)).collect() };
        let flipped = identified_set(-1.0, &neg, &rc).unwrap();
        assert!((flipped.upper + set.lower).abs() < 1e-9 && (flipped.lower + set.upper).abs() < 1e-9);
    }

    #[test]
    fn nesting_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let t = rng.random_range(3..=6u32);
            let mut map = DeviationMap::new(t);
            for g in 1..=t {
                if rng.random::<f64>() < 0.6 {
                    for s in g..=t {
                        map = map.with(g, s, rng.random_range(-1.0..1.0));
                    }
                }
            }
            if map.coefficients.is_empty() {
                map = map.with(2, t, 1.0);
            }
            let small = RestrictionClass::curvature(rng.random::<f64>(), rng.random::<f64>() * 0.2, rng.random::<f64>()).unwrap();
            let big = RestrictionClass::curvature(
                small.b + rng.random::<f64>(),
                small.gamma + rng.random::<f64>() * 0.2,
                small.delta_r + rng.random::<f64>(),
            )
            .unwrap();
            let a = identified_set(0.4, &map, &small).unwrap();
            let b = identified_set(0.4, &map, &big).unwrap();
            assert!(a.lower <= a.upper + 1e-12);
            assert!(b.lower <= a.lower + 1e-9 && a.upper <= b.upper + 1e-9);
            assert!(a.contains(0.4));
        }
    }

    #[test]
    fn unit_level_bound_example() {
        let map = DeviationMap::new(2).with(2, 2, 1.0);
        let set = identified_set(1.0, &map, &RestrictionClass::new(RestrictionKind::LevelBound, 0.3, 0.0, 0.0).unwrap()).unwrap();
        assert!((set.lower - 0.7).abs() < 1e-12 && (set.upper - 1.3).abs() < 1e-12);
    }

    fn pre(betas: &[f64], sigmas: &[f64]) -> BTreeMap<i64, (f64, f64)> {
        betas.iter().zip(sigmas).enumerate().map(|(i, (&b, &s))| (-(betas.len() as i64) - 1 + i as i64, (b, s))).collect()
    }

    #[test]
    fn calibration_example() {
        let c = calibrate(&pre(&[0.01, -0.03, 0.02], &[0.01; 3]), 1.0, 1.0, 0.5, EPS_TAU).unwrap();
        assert!((c.a_pre - 0.03).abs() < 1e-15);
        assert!((c.m_pre - 3.0).abs() < 1e-12);
        assert!((c.drift - 0.05).abs() < 1e-15);
        assert!((c.b_hat - 0.03).abs() < 1e-15);
        assert!((c.delta_hat - 0.015).abs() < 1e-15);
        assert!((c.gamma_hat - 5.0).abs() < 1e-5);
        assert_eq!(c.b_grid.iter().map(|p| p.0).collect::<Vec<_>>(), KAPPA_B_GRID.to_vec());
        let z = calibrate(&pre(&[0.0; 4], &[0.1; 4]), 0.5, 1.0, 1.0, EPS_TAU).unwrap();
        assert_eq!((z.a_pre, z.m_pre, z.drift, z.b_hat, z.gamma_hat, z.delta_hat), (0.0, 0.0, 0.0, 0.0, 0.0, 0.0));
        assert_eq!(calibrate(&pre(&[0.1], &[0.1]), 1.0, 1.0, 1.0, EPS_TAU), Err(Error::TooFewPrePeriods { got: 1 }));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn calibration_is_monotone(
            betas in prop::collection::vec(-1.0f64..1.0, 2..6),
            sig in prop::collection::vec(0.01f64..1.0, 6),
            bump in prop::collection::vec(0.0f64..0.5, 6),
            scale in 1.0f64..3.0,
            tau in -2.0f64..2.0,
        ) {
            let s = &sig[..betas.len()];
            let base = calibrate(&pre(&betas, s), tau, 1.0, 0.5, EPS_TAU).unwrap();
            let inflated: Vec<f64> = betas.iter().zip(&bump).map(|(b, u)| b.signum() * (b.abs() + u)).collect();
            let up = calibrate(&pre(&inflated, s), tau, 1.0, 0.5, EPS_TAU).unwrap();
            prop_assert!(up.a_pre >= base.a_pre && up.m_pre >= base.m_pre);
            prop_assert!(up.b_hat >= base.b_hat && up.delta_hat >= base.delta_hat);
            let scaled: Vec<f64> = betas.iter().map(|b| b * scale).collect();
            let sc = calibrate(&pre(&scaled, s), tau, 1.0, 0.5, EPS_TAU).unwrap();
            for (x, y) in [(sc.a_pre, base.a_pre), (sc.m_pre, base.m_pre), (sc.drift, base.drift), (sc.b_hat, base.b_hat), (sc.delta_hat, base.delta_hat), (sc.gamma_hat, base.gamma_hat)] {
                prop_assert!(x >= y && x >= 0.0);
            }
            prop_assert_eq!(sc.drift >= base.drift, sc.gamma_hat >= base.gamma_hat);
        }
    }

    #[test]
    fn holdout_examples() {
        let grid: Vec<f64> = (0..=10).map(|i| 0.02 * i as f64).collect();
        let r = holdout_b(&[0.04], &|b| vec![(0.1 - b).max(0.0)], &grid).unwrap();
        assert!((r.b - 0.06).abs() < 1e-12 && r.feasible && r.monotone);
        let r = holdout_b(&[0.04, 0.5], &|_| vec![0.01], &grid).unwrap();
        assert_eq!(r.b, 0.0);
        let r = holdout_b(&[0.04], &|b| vec![if (b - 0.02).abs() < 1e-9 { 0.2 } else { (0.1 - b).max(0.0) }], &grid).unwrap();
        assert!(!r.monotone && (r.b - 0.06).abs() < 1e-12);
        let r = holdout_b(&[0.04], &|_| vec![1.0], &grid).unwrap();
        assert!(!r.feasible && r.b == 0.2);
        assert_eq!(holdout_b(&[0.04], &|_| vec![], &[]), Err(Error::EmptyGrid));
    }

    #[test]
    fn type7_quantile() {
        assert!((quantile(&[1.0, 2.0, 3.0, 4.0], 0.95) - 3.85).abs() < 1e-12);
        assert_eq!(quantile(&[2.0], 0.95), 2.0);
    }

    #[test]
    fn frontier_examples() {
        let never = |_b: f64, g: f64, _d: f64| (1.0 - g, 1.0 + g);
        let f = breakdown_frontier(&never, 0.0, 0.0, &GAMMA_GRID_LEVEL).unwrap();
        assert!(f.capped && f.value == 0.15);
        let at = |_b: f64, g: f64, _d: f64| (0.1 - g, 0.2);
        let f = breakdown_frontier(&at, 0.0, 0.0, &GAMMA_GRID_LEVEL).unwrap();
        assert!(!f.capped && f.value == 0.10);
        assert_eq!(breakdown_frontier(&at, 0.0, 0.0, &[]), Err(Error::EmptyGrid));
        let m = monitored_crossing(&[(0.0, 0.033), (0.05, 0.067), (0.10, 0.240)], 0.10).unwrap();
        assert!((m.value - 0.059537572).abs() < 1e-6 && !m.capped);
        let m = monitored_crossing(&[(0.0, 0.033), (0.05, 0.10)], 0.10).unwrap();
        assert_eq!(m.value, 0.05);
        let m = monitored_crossing(&[(0.0, 0.01), (0.05, 0.02)], 0.10).unwrap();
        assert!(m.capped && m.value == 0.05);
    }

    #[test]
    fn admissibility_examples() {
        let cells = [
            RegionInput { b: 0.0, gamma: 0.0, delta_r: 0.0, coverage: 0.95, lower: 0.5, upper: 1.5 },
            RegionInput { b: 1.0, gamma: 0.0, delta_r: 0.0, coverage: 0.92, lower: 0.0, upper: 2.0 },
            RegionInput { b: 2.0, gamma: 0.0, delta_r: 0.0, coverage: 0.89, lower: 0.2, upper: 1.2 },
        ];
        let r = sensitivity_region(&cells).unwrap();
        assert!(r[0].admissible && r[0].sign_stable);
        assert!(r[1].admissible && !r[1].sign_stable);
        assert!(!r[2].admissible && r[2].sign_stable);
        assert_eq!(sensitivity_region(&cells[1..]), Err(Error::MissingBaseline));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn region_is_down_set(theta in -2.0f64..2.0, se in 0.01f64..0.5, t0 in 2u32..8) {
            let bs = [0.0, 0.1, 0.3, 0.6];
            let gs = [0.0, 0.05, 0.10, 0.15];
            let ds = [0.0, 0.5, 1.0];
            let mut cells = vec![];
            for &b in &bs { for &g in &gs { for &d in &ds {
                let (lower, upper) = robust_interval(theta, se, bias_bound(b, g, d, t0), 0.05).unwrap();
                cells.push(RegionInput { b, gamma: g, delta_r: d, coverage: 0.95, lower, upper });
            }}}
            let r = sensitivity_region(&cells).unwrap();
            for x in &r {
                for y in &r {
                    if y.b <= x.b && y.gamma <= x.gamma && y.delta_r <= x.delta_r {
                        prop_assert!(!x.admissible || y.admissible);
                        prop_assert!(!x.sign_stable || y.sign_stable);
                    }
                }
            }
        }

        #[test]
        fn selection_is_minimal(cut in 0.0f64..3.0, wb in 0.0f64..1.0, wg in 0.0f64..1.0) {
            let bg = [0.0, 0.25, 0.5, 1.0, 2.0];
            let gg = GAMMA_GRID_PERCENT;
            let dg = C_R_GRID;
            let eval = |b: f64, g: f64, d: f64| (0.2 - 0.1 * (wb * b + wg * g / 10.0 + d), (1.0 - b).max(0.0) * cut);
            let s = select_minimal(&bg, &gg, &dg, &eval, 0.05, 0.5).unwrap();
            if let Some((b, g, d)) = s.chosen {
                let (p, h) = eval(b, g, d);
                prop_assert!(p <= 0.05 && h <= 0.5);
                for st in &s.trace {
                    let smaller = st.b <= b && st.gamma <= g && st.delta_r <= d && (st.b, st.gamma, st.delta_r) != (b, g, d);
                    prop_assert!(!(smaller && st.feasible));
                }
            } else {
                prop_assert!(s.trace.iter().all(|st| !st.feasible));
            }
        }
    }
}

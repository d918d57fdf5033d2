//! Replication loop and per-cell summaries.
//!
//! Replication `r` draws its panel from seed `hash64(base_seed, r)`, so the
//! same replication index sees the same shocks in every violation cell.
//! Replications run on a rayon pool but are collected in index order and
//! reduced sequentially, which keeps every summary bit-identical across
//! thread counts.

use std::collections::BTreeMap;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{distortion_association, Association};
use crate::error::{Error, Result};
use crate::montecarlo::dgp::{simulate, true_targets, DgpSpec, Design, Truth, Violation};
use crate::montecarlo::estimators::{estimate, Estimate, Estimator, EstimatorSettings};
use crate::montecarlo::placebo::{placebo_test, PlaceboVariant, REJECTION_ALPHAS};
use crate::montecarlo::rng::hash64;
use crate::sensitivity::{
    bias_bound, critical_value, monitored_crossing, sensitivity_region, FrontierRow, RegionInput, GAMMA_GRID_LEVEL,
};

/// Placebo rejection rate at which the frontier `Γ*` is read off.
pub const FRONTIER_THRESHOLD: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSettings {
    pub estimators: Vec<Estimator>,
    pub replications: usize,
    pub base_seed: u64,
    /// Worker threads; 0 lets rayon choose.
    pub threads: usize,
    /// Nominal levels of the reported intervals.
    pub interval_alphas: Vec<f64>,
    /// Treatment date entering the robust bias bound; `None` uses the
    /// design's own (`t0` for the two-arm design, 5 otherwise).
    pub robust_t0: Option<u32>,
    pub estimator: EstimatorSettings,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            estimators: vec![Estimator::GroupTime],
            replications: 200,
            base_seed: 20240501,
            threads: 0,
            interval_alphas: vec![0.10, 0.05],
            robust_t0: None,
            estimator: EstimatorSettings::default(),
        }
    }
}

impl RunSettings {
    fn validate(&self) -> Result<()> {
        if self.replications == 0 {
            return Err(Error::ConfigInvalid("replications must be at least 1".into()));
        }
        if self.estimators.is_empty() {
            return Err(Error::ConfigInvalid("no estimator requested".into()));
        }
        for &a in &self.interval_alphas {
            critical_value(a)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IntervalKind {
    Wald,
    Robust,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntervalMetrics {
    pub kind: IntervalKind,
    pub alpha: f64,
    pub coverage: f64,
    pub length: f64,
    pub utex: f64,
    /// Average endpoints.
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentMetrics {
    pub g: u32,
    pub ell: i64,
    pub truth: f64,
    pub bias: f64,
    pub rmse: f64,
    pub medae: f64,
}

/// Summary of one estimator in one `(design, Δ, B, Γ)` cell.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellMetrics {
    pub design: Design,
    pub estimator: Estimator,
    pub violation: Violation,
    pub replications: usize,
    /// Replications where the estimator returned an error.
    pub failures: usize,
    pub theta_true: f64,
    pub bias: f64,
    pub rmse: f64,
    pub variance: f64,
    pub medae: f64,
    pub intervals: Vec<IntervalMetrics>,
    /// Placebo rejection at each of [`REJECTION_ALPHAS`].
    pub rejpre: [f64; 3],
    pub placebo_failures: usize,
    /// Set by [`run_grid`], which knows the baseline cell.
    pub admissible: Option<bool>,
    pub components: Vec<ComponentMetrics>,
    /// `(N(0), C(0))` against `Dist(0)`, for TWFE only.
    pub association: Option<Association>,
}

impl CellMetrics {
    pub fn interval(&self, kind: IntervalKind, alpha: f64) -> Option<&IntervalMetrics> {
        self.intervals.iter().find(|m| m.kind == kind && m.alpha == alpha)
    }
}

struct Replication {
    placebo: Option<[bool; 3]>,
    estimates: Vec<Option<Estimate>>,
}

fn placebo_variant(design: Design) -> PlaceboVariant {
    match design {
        Design::Mc84Small => PlaceboVariant::Mc84Means,
        _ => PlaceboVariant::Mc81Wald,
    }
}

fn cohort_weights(truth: &Truth) -> BTreeMap<u32, f64> {
    let mut m = BTreeMap::new();
    for (&(g, _), &w) in &truth.weights {
        *m.entry(g).or_insert(0.0) += w;
    }
    m
}

/// Runs `f(r)` for `r in 0..reps` on a pool with `threads` workers and
/// returns the results in index order.
pub fn par_replicate<T: Send>(reps: usize, threads: usize, f: impl Fn(u64) -> T + Sync + Send) -> Result<Vec<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::ConfigInvalid(format!("thread pool: {e}")))?;
    Ok(pool.install(|| (0..reps as u64).into_par_iter().map(&f).collect()))
}

fn replicate(spec: &DgpSpec, truth: &Truth, settings: &RunSettings, r: u64) -> Replication {
    let seed = hash64(settings.base_seed, r);
    let Ok(panel) = simulate(&spec.clone().with_seed(seed)) else {
        return Replication { placebo: None, estimates: vec![None; settings.estimators.len()] };
    };
    let placebo = placebo_test(&panel, placebo_variant(spec.design), &cohort_weights(truth)).ok().map(|p| p.reject);
    let estimates = settings
        .estimators
        .iter()
        .map(|&e| estimate(e, &panel, truth, &settings.estimator, hash64(seed, 1)).ok())
        .collect();
    Replication { placebo, estimates }
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in v {
        s += x;
        n += 1;
    }
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// `(bias, rmse, variance, medae)` of `values` around `truth`.
fn accuracy(values: &[f64], truth: f64) -> (f64, f64, f64, f64) {
    let err: Vec<f64> = values.iter().map(|v| v - truth).collect();
    let bias = mean(err.iter().copied());
    let variance = mean(err.iter().map(|e| (e - bias) * (e - bias)));
    let rmse = mean(err.iter().map(|e| e * e)).sqrt();
    (bias, rmse, variance, median(err.iter().map(|e| e.abs()).collect()))
}

fn robust_t0(spec: &DgpSpec, settings: &RunSettings) -> u32 {
    settings.robust_t0.unwrap_or(match spec.design {
        Design::Mc84Small => spec.mc84.t0,
        _ => 5,
    })
}

fn summarise(
    spec: &DgpSpec,
    truth: &Truth,
    settings: &RunSettings,
    reps: &[Replication],
    idx: usize,
) -> Result<CellMetrics> {
    let est = settings.estimators[idx];
    let ok: Vec<&Estimate> = reps.iter().filter_map(|r| r.estimates[idx].as_ref()).collect();
    let theta_true = truth.theta_target;
    let thetas: Vec<f64> = ok.iter().map(|e| e.theta).collect();
    let (bias, rmse, variance, medae) = accuracy(&thetas, theta_true);

    let v = spec.violation;
    let bound = bias_bound(v.b, v.gamma, v.delta_r, robust_t0(spec, settings));
    let mut intervals = vec![];
    if ok.iter().all(|e| e.se.is_some()) && !ok.is_empty() {
        for kind in [IntervalKind::Wald, IntervalKind::Robust] {
            for &alpha in &settings.interval_alphas {
                let z = critical_value(alpha)?;
                let half = |e: &Estimate| z * e.se.unwrap() + if kind == IntervalKind::Robust { bound } else { 0.0 };
                let lo: Vec<f64> = ok.iter().map(|e| e.theta - half(e)).collect();
                let hi: Vec<f64> = ok.iter().map(|e| e.theta + half(e)).collect();
                let cover = lo.iter().zip(&hi).filter(|(l, u)| **l <= theta_true && theta_true <= **u).count();
                let (ml, mu) = (mean(lo.iter().copied()), mean(hi.iter().copied()));
                intervals.push(IntervalMetrics {
                    kind,
                    alpha,
                    coverage: cover as f64 / ok.len() as f64,
                    length: mean(lo.iter().zip(&hi).map(|(l, u)| u - l)),
                    utex: (mu - theta_true) - (theta_true - ml),
                    lower: ml,
                    upper: mu,
                });
            }
        }
    }

    let placebo: Vec<[bool; 3]> = reps.iter().filter_map(|r| r.placebo).collect();
    let mut rejpre = [f64::NAN; 3];
    if !placebo.is_empty() {
        for (j, r) in rejpre.iter_mut().enumerate() {
            *r = placebo.iter().filter(|p| p[j]).count() as f64 / placebo.len() as f64;
        }
    }

    let components = truth
        .weights
        .keys()
        .map(|&(g, ell)| {
            let vals: Vec<f64> = ok.iter().filter_map(|e| e.cells.get(&(g, ell)).copied()).collect();
            let t = truth.cells[&(g, ell)];
            let (bias, rmse, _, medae) = accuracy(&vals, t);
            ComponentMetrics { g, ell, truth: t, bias, rmse, medae }
        })
        .collect();

    let association = if est == Estimator::Twfe {
        let triples: Vec<_> = ok.iter().filter_map(|e| e.diagnostics).collect();
        distortion_association(&triples).ok()
    } else {
        None
    };

    Ok(CellMetrics {
        design: spec.design,
        estimator: est,
        violation: v,
        replications: reps.len(),
        failures: reps.len() - ok.len(),
        theta_true,
        bias,
        rmse,
        variance,
        medae,
        intervals,
        rejpre,
        placebo_failures: reps.len() - placebo.len(),
        admissible: None,
        components,
        association,
    })
}

/// Monte Carlo summaries of every requested estimator in one cell.
pub fn run_cell(spec: &DgpSpec, settings: &RunSettings) -> Result<Vec<CellMetrics>> {
    settings.validate()?;
    spec.validate()?;
    let truth = true_targets(spec)?;
    let reps = par_replicate(settings.replications, settings.threads, |r| replicate(spec, &truth, settings, r))?;
    (0..settings.estimators.len()).map(|i| summarise(spec, &truth, settings, &reps, i)).collect()
}

/// Runs every violation cell and marks admissibility of the robust
/// interval at level 0.05 against the `(0,0,0)` cell.
pub fn run_grid(base: &DgpSpec, cells: &[Violation], settings: &RunSettings) -> Result<Vec<CellMetrics>> {
    let mut out = vec![];
    for &v in cells {
        out.extend(run_cell(&base.clone().with_violation(v), settings)?);
    }
    for &est in &settings.estimators {
        let idx: Vec<usize> = (0..out.len()).filter(|&i| out[i].estimator == est).collect();
        let inputs: Option<Vec<RegionInput>> = idx
            .iter()
            .map(|&i| {
                let c = &out[i];
                c.interval(IntervalKind::Robust, 0.05).map(|m| RegionInput {
                    b: c.violation.b,
                    gamma: c.violation.gamma,
                    delta_r: c.violation.delta_r,
                    coverage: m.coverage,
                    lower: m.lower,
                    upper: m.upper,
                })
            })
            .collect();
        let Some(inputs) = inputs else { continue };
        let Ok(region) = sensitivity_region(&inputs) else { continue };
        for (&i, r) in idx.iter().zip(region) {
            out[i].admissible = Some(r.admissible);
        }
    }
    Ok(out)
}

/// Full factorial `Δ × B × Γ` list of violation cells.
pub fn violation_grid(delta: &[f64], b: &[f64], gamma: &[f64]) -> Vec<Violation> {
    let mut v = vec![];
    for &d in delta {
        for &bb in b {
            for &g in gamma {
                v.push(Violation::new(d, bb, g));
            }
        }
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaceboRates {
    pub violation: Violation,
    pub rates: [f64; 3],
    pub failures: usize,
}

/// Placebo rejection rates only, without running any estimator.
pub fn placebo_rates(spec: &DgpSpec, replications: usize, base_seed: u64, threads: usize) -> Result<PlaceboRates> {
    spec.validate()?;
    if replications == 0 {
        return Err(Error::ConfigInvalid("replications must be at least 1".into()));
    }
    let truth = true_targets(spec)?;
    let weights = cohort_weights(&truth);
    let variant = placebo_variant(spec.design);
    let flags = par_replicate(replications, threads, |r| {
        simulate(&spec.clone().with_seed(hash64(base_seed, r)))
            .and_then(|p| placebo_test(&p, variant, &weights))
            .ok()
            .map(|p| p.reject)
    })?;
    let ok: Vec<[bool; 3]> = flags.into_iter().flatten().collect();
    let mut rates = [f64::NAN; 3];
    if !ok.is_empty() {
        for (j, r) in rates.iter_mut().enumerate() {
            *r = ok.iter().filter(|p| p[j]).count() as f64 / ok.len() as f64;
        }
    }
    Ok(PlaceboRates { violation: spec.violation, rates, failures: replications - ok.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Mc84Grid {
    pub b: Vec<f64>,
    pub delta_r: Vec<f64>,
    pub gamma: Vec<f64>,
    pub replications: usize,
}

impl Default for Mc84Grid {
    fn default() -> Self {
        Self {
            b: vec![0.0, 0.5, 1.0, 1.5],
            delta_r: vec![0.0, 0.25, 0.5],
            gamma: GAMMA_GRID_LEVEL.to_vec(),
            replications: 150,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mc84Tables {
    pub grid: Mc84Grid,
    /// One entry per `(B, Δ, Γ)` in that nesting order.
    pub rates: Vec<PlaceboRates>,
    pub frontier: Vec<FrontierRow>,
}

impl Mc84Tables {
    /// Rejection rate of the 1.96 rule (level 0.05).
    pub fn rate(&self, b: f64, delta_r: f64, gamma: f64) -> Option<f64> {
        self.rates
            .iter()
            .find(|p| p.violation.b == b && p.violation.delta_r == delta_r && p.violation.gamma == gamma)
            .map(|p| p.rates[1])
    }

    pub fn frontier_at(&self, b: f64, delta_r: f64) -> Option<&FrontierRow> {
        self.frontier.iter().find(|f| f.b == b && f.delta_r == delta_r)
    }
}

/// Placebo rejection table over `B × Δ × Γ` and the frontier `Γ*` where the
/// 1.96-rule rejection rate first reaches [`FRONTIER_THRESHOLD`].
pub fn mc84_tables(base: &DgpSpec, grid: &Mc84Grid, base_seed: u64, threads: usize) -> Result<Mc84Tables> {
    if grid.b.is_empty() || grid.delta_r.is_empty() || grid.gamma.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let mut rates = vec![];
    let mut frontier = vec![];
    for &b in &grid.b {
        for &d in &grid.delta_r {
            let mut curve = vec![];
            for &g in &grid.gamma {
                let spec = base.clone().with_violation(Violation::new(d, b, g));
                let p = placebo_rates(&spec, grid.replications, base_seed, threads)?;
                curve.push((g, p.rates[1]));
                rates.push(p);
            }
            let cross = monitored_crossing(&curve, FRONTIER_THRESHOLD)?;
            frontier.push(FrontierRow { b, delta_r: d, gamma_star: cross.value, capped: cross.capped });
        }
    }
    Ok(Mc84Tables { grid: grid.clone(), rates, frontier })
}

fn num(v: f64) -> String {
    format!("{v:.6}")
}

/// Wide placebo table at one `B`: rows `Δ`, columns `Γ`, 1.96-rule rates.
pub fn write_placebo_table<W: Write>(out: W, t: &Mc84Tables, b: f64) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["DeltaR".to_string()];
    header.extend(t.grid.gamma.iter().map(|g| format!("Gamma={g}")));
    w.write_record(&header)?;
    for &d in &t.grid.delta_r {
        let mut row = vec![num(d)];
        for &g in &t.grid.gamma {
            row.push(t.rate(b, d, g).map(num).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Wide frontier table: rows `Δ`, columns `B`.
pub fn write_frontier_table<W: Write>(out: W, t: &Mc84Tables) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["DeltaR".to_string()];
    header.extend(t.grid.b.iter().map(|b| format!("B={b}")));
    w.write_record(&header)?;
    for &d in &t.grid.delta_r {
        let mut row = vec![num(d)];
        for &b in &t.grid.b {
            row.push(t.frontier_at(b, d).map(|f| num(f.gamma_star)).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Long placebo rates: one row per `(B, Δ, Γ)` with all three levels.
pub fn write_placebo_rates<W: Write>(out: W, rates: &[PlaceboRates]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["B", "DeltaR", "Gamma", "rejpre_10", "rejpre_05", "rejpre_01", "failures"])?;
    for p in rates {
        let v = p.violation;
        let mut row = vec![num(v.b), num(v.delta_r), num(v.gamma)];
        row.extend(p.rates.iter().map(|&r| num(r)));
        row.push(p.failures.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn alpha_tag(a: f64) -> String {
    format!("{:02}", (a * 100.0).round() as i64)
}

/// One row per cell and estimator with the columns of the per-cell
/// performance table.
pub fn write_cells_csv<W: Write>(out: W, cells: &[CellMetrics], interval_alphas: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "design", "estimator", "DeltaR", "B", "Gamma", "replications", "failures", "theta_true", "bias", "rmse", "medae",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for kind in ["wald", "robust"] {
        for &a in interval_alphas {
            for m in ["cov", "len", "utex"] {
                header.push(format!("{m}_{kind}_{}", alpha_tag(a)));
            }
        }
    }
    for a in REJECTION_ALPHAS {
        header.push(format!("rejpre_{}", alpha_tag(a)));
    }
    header.push("admissible".into());
    w.write_record(&header)?;
    let e = |v: f64| format!("{v:.12e}");
    for c in cells {
        let v = c.violation;
        let mut row = vec![
            c.design.label().to_string(),
            c.estimator.label().to_string(),
            num(v.delta_r),
            num(v.b),
            num(v.gamma),
            c.replications.to_string(),
            c.failures.to_string(),
            e(c.theta_true),
            e(c.bias),
            e(c.rmse),
            e(c.medae),
        ];
        for kind in [IntervalKind::Wald, IntervalKind::Robust] {
            for &a in interval_alphas {
                match c.interval(kind, a) {
                    Some(m) => row.extend([e(m.coverage), e(m.length), e(m.utex)]),
                    None => row.extend([String::new(), String::new(), String::new()]),
                }
            }
        }
        row.extend(c.rejpre.iter().map(|&r| e(r)));
        row.push(c.admissible.map(|a| (a as u8).to_string()).unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

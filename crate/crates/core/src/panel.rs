//! Staggered-adoption panel model: units, periods, adoption cohorts, the
//! absorbing treatment path, event-time indexing and design summaries.
//!
//! Periods are numbered `1..=T`. Never-treated units carry the explicit
//! [`Cohort::Never`] sentinel rather than `T + 1`, so not-yet-treated logic
//! has to branch on it.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adoption time of a unit. `At(g)` adopts in period `g`; `Never` stays untreated.
///
/// The derived ordering puts every `At(g)` before `Never`, which is exactly the
/// order needed for "treated later than t" comparisons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Cohort {
    At(u32),
    Never,
}

impl Cohort {
    pub fn adoption(self) -> Option<u32> {
        match self {
            Cohort::At(g) => Some(g),
            Cohort::Never => None,
        }
    }

    pub fn is_never(self) -> bool {
        matches!(self, Cohort::Never)
    }

    /// Treated at period `t` under the absorbing path.
    pub fn treated_at(self, t: u32) -> bool {
        matches!(self, Cohort::At(g) if g <= t)
    }

    /// Parses `"inf"` (any case) as `Never`, otherwise a positive integer.
    pub fn parse(s: &str) -> Result<Cohort> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("inf") || s.eq_ignore_ascii_case("never") {
            return Ok(Cohort::Never);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::InvalidPanel(format!("cannot parse cohort '{s}'")))?;
        if v.is_infinite() && v > 0.0 {
            return Ok(Cohort::Never);
        }
        if v < 1.0 || v.fract() != 0.0 {
            return Err(Error::InvalidPanel(format!("cohort '{s}' is not a positive integer")));
        }
        Ok(Cohort::At(v as u32))
    }
}

impl fmt::Display for Cohort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Cohort::At(g) => write!(f, "{g}"),
            Cohort::Never => write!(f, "inf"),
        }
    }
}

/// One long-format input record.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelRow {
    pub unit: String,
    pub time: i64,
    pub outcome: f64,
    pub cohort: Cohort,
    pub covariates: Vec<f64>,
    pub exposure: Option<f64>,
    pub observed: Option<bool>,
    /// Optional explicit treatment indicator, checked against the cohort.
    pub treated: Option<bool>,
}

impl PanelRow {
    pub fn new(unit: impl Into<String>, time: i64, outcome: f64, cohort: Cohort) -> Self {
        PanelRow {
            unit: unit.into(),
            time,
            outcome,
            cohort,
            covariates: Vec::new(),
            exposure: None,
            observed: None,
            treated: None,
        }
    }
}

/// Support trimming thresholds: treated units need at least `min_pre`
/// pre-periods and `min_post` post-periods, otherwise they are dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildOptions {
    pub min_pre: u32,
    pub min_post: u32,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { min_pre: 1, min_post: 1 }
    }
}

/// Rectangular unit-by-period panel. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    n: usize,
    periods: u32,
    /// Row-major `n x T` outcomes.
    y: Vec<f64>,
    cohorts: Vec<Cohort>,
    d_x: usize,
    /// Row-major `n x T x d_x` covariates.
    x: Vec<f64>,
    exposure: Option<Vec<f64>>,
    observed: Vec<bool>,
    unit_ids: Vec<String>,
    trimmed: Vec<String>,
}

impl Panel {
    /// Builds a panel from dense arrays, validating every invariant.
    ///
    /// `y` is `n x T` row-major, `x` is `n x T x d_x` row-major, `observed`
    /// defaults to all-true.
    pub fn from_arrays(
        periods: u32,
        cohorts: Vec<Cohort>,
        y: Vec<f64>,
        d_x: usize,
        x: Vec<f64>,
        exposure: Option<Vec<f64>>,
        observed: Option<Vec<bool>>,
    ) -> Result<Panel> {
        let n = cohorts.len();
        if n == 0 || periods == 0 {
            return Err(Error::EmptyPanel);
        }
        let tl = periods as usize;
        if y.len() != n * tl {
            return Err(Error::InvalidPanel(format!("outcome length {} != n*T = {}", y.len(), n * tl)));
        }
        if x.len() != n * tl * d_x {
            return Err(Error::InvalidPanel("covariate array has the wrong length".into()));
        }
        let observed = observed.unwrap_or_else(|| vec![true; n * tl]);
        if observed.len() != n * tl {
            return Err(Error::InvalidPanel("observed mask has the wrong length".into()));
        }
        let unit_ids = (1..=n).map(|i| i.to_string()).collect();
        let p = Panel { n, periods, y, cohorts, d_x, x, exposure, observed, unit_ids, trimmed: Vec::new() };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        for (i, c) in self.cohorts.iter().enumerate() {
            if let Cohort::At(g) = c {
                if *g == 0 || *g > self.periods {
                    return Err(Error::InvalidPanel(format!(
                        "unit {} has cohort {g} outside 1..={}; encode never-treated as inf",
                        self.unit_ids[i], self.periods
                    )));
                }
            }
        }
        if let Some(w) = &self.exposure {
            if w.len() != self.n {
                return Err(Error::InvalidPanel("exposure length != n".into()));
            }
            if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::InvalidPanel("exposure weights must be finite and >= 0".into()));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::InvalidPanel("exposure weights must have positive sum".into()));
            }
        }
        for (idx, &o) in self.observed.iter().enumerate() {
            if o && !self.y[idx].is_finite() {
                let (i, t) = (idx / self.periods as usize, idx % self.periods as usize + 1);
                return Err(Error::InvalidPanel(format!(
                    "observed outcome for unit {} at time {t} is not finite",
                    self.unit_ids[i]
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }
    /// Number of periods `T`.
    pub fn periods(&self) -> u32 {
        self.periods
    }
    pub fn d_x(&self) -> usize {
        self.d_x
    }
    pub fn cohort(&self, i: usize) -> Cohort {
        self.cohorts[i]
    }
    pub fn cohorts(&self) -> &[Cohort] {
        &self.cohorts
    }
    pub fn unit_ids(&self) -> &[String] {
        &self.unit_ids
    }
    /// Units removed by the support trimming rule.
    pub fn trimmed(&self) -> &[String] {
        &self.trimmed
    }
    pub fn exposure(&self) -> Option<&[f64]> {
        self.exposure.as_deref()
    }

    #[inline]
    fn idx(&self, i: usize, t: u32) -> usize {
        debug_assert!(t >= 1 && t <= self.periods);
        i * self.periods as usize + (t as usize - 1)
    }

    /// Outcome of unit `i` at period `t` (1-based).
    #[inline]
    pub fn y(&self, i: usize, t: u32) -> f64 {
        self.y[self.idx(i, t)]
    }
    #[inline]
    pub fn observed(&self, i: usize, t: u32) -> bool {
        self.observed[self.idx(i, t)]
    }
    pub fn is_balanced(&self) -> bool {
        self.observed.iter().all(|&o| o)
    }
    /// Covariate vector of unit `i` at period `t`.
    #[inline]
    pub fn x(&self, i: usize, t: u32) -> &[f64] {
        let s = self.idx(i, t) * self.d_x;
        &self.x[s..s + self.d_x]
    }
    /// `D_it = 1{G_i <= t, G_i != NEVER}`.
    #[inline]
    pub fn d(&self, i: usize, t: u32) -> bool {
        self.cohorts[i].treated_at(t)
    }
    /// Row-major outcome array.
    pub fn outcomes(&self) -> &[f64] {
        &self.y
    }
    pub fn observed_mask(&self) -> &[bool] {
        &self.observed
    }

    /// Copy of the panel with a different outcome array (same design).
    pub fn with_outcomes(&self, y: Vec<f64>) -> Result<Panel> {
        if y.len() != self.y.len() {
            return Err(Error::InvalidPanel("replacement outcome has the wrong length".into()));
        }
        let mut p = self.clone();
        p.y = y;
        p.validate()?;
        Ok(p)
    }

    /// Sorted distinct treated adoption times present in the panel.
    pub fn treated_cohorts(&self) -> Vec<u32> {
        let set: BTreeSet<u32> = self.cohorts.iter().filter_map(|c| c.adoption()).collect();
        set.into_iter().collect()
    }

    pub fn has_never_treated(&self) -> bool {
        self.cohorts.iter().any(|c| c.is_never())
    }

    /// Writes the panel in the long CSV schema
    /// `unit,time,outcome,cohort[,x1..xd][,exposure][,observed]`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["unit".to_string(), "time".into(), "outcome".into(), "cohort".into()];
        for j in 1..=self.d_x {
            header.push(format!("x{j}"));
        }
        if self.exposure.is_some() {
            header.push("exposure".into());
        }
        let masked = !self.is_balanced();
        if masked {
            header.push("observed".into());
        }
        wr.write_record(&header)?;
        for i in 0..self.n {
            for t in 1..=self.periods {
                let mut rec = vec![
                    self.unit_ids[i].clone(),
                    t.to_string(),
                    self.y(i, t).to_string(),
                    self.cohorts[i].to_string(),
                ];
                rec.extend(self.x(i, t).iter().map(|v| v.to_string()));
                if let Some(e) = &self.exposure {
                    rec.push(e[i].to_string());
                }
                if masked {
                    rec.push(if self.observed(i, t) { "1".into() } else { "0".into() });
                }
                wr.write_record(&rec)?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    /// Reads the long CSV schema and builds a validated panel.
    pub fn read_csv<R: Read>(r: R, opts: BuildOptions) -> Result<Panel> {
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers()?.clone();
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let col = |name: &str| {
            find(name).ok_or_else(|| Error::InvalidPanel(format!("missing required column '{name}'")))
        };
        let (cu, ct, cy, cg) = (col("unit")?, col("time")?, col("outcome")?, col("cohort")?);
        let mut xcols: Vec<(usize, usize)> = headers
            .iter()
            .enumerate()
            .filter_map(|(pos, h)| {
                let h = h.trim();
                h.strip_prefix('x').and_then(|s| s.parse::<usize>().ok()).map(|j| (j, pos))
            })
            .collect();
        xcols.sort();
        for (expect, (j, _)) in xcols.iter().enumerate() {
            if *j != expect + 1 {
                return Err(Error::InvalidPanel("covariate columns must be x1..xd".into()));
            }
        }
        let ce = find("exposure");
        let co = find("observed");
        let num = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::InvalidPanel(format!("cannot parse {what} value '{s}'")))
        };
        let mut rows = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let time = num(&rec[ct], "time")?;
            if time.fract() != 0.0 {
                return Err(Error::InvalidPanel(format!("time '{}' is not an integer", &rec[ct])));
            }
            let mut row = PanelRow::new(rec[cu].trim(), time as i64, num(&rec[cy], "outcome")?, Cohort::parse(&rec[cg])?);
            for (_, pos) in &xcols {
                row.covariates.push(num(&rec[*pos], "covariate")?);
            }
            if let Some(pos) = ce {
                row.exposure = Some(num(&rec[pos], "exposure")?);
            }
            if let Some(pos) = co {
                row.observed = Some(match rec[pos].trim() {
                    "1" | "true" | "TRUE" | "True" => true,
                    "0" | "false" | "FALSE" | "False" => false,
                    other => return Err(Error::InvalidPanel(format!("cannot parse observed value '{other}'"))),
                });
            }
            rows.push(row);
        }
        build_panel(&rows, opts)
    }
}

/// Builds a panel from long-format rows.
///
/// Unit ids map to dense indices in order of first appearance. Periods must be
/// the integers `1..=T`. Gaps are only allowed when some row carries an
/// explicit `observed` flag; the gap cells are then marked unobserved.
pub fn build_panel(rows: &[PanelRow], opts: BuildOptions) -> Result<Panel> {
    if rows.is_empty() {
        return Err(Error::EmptyPanel);
    }
    let d_x = rows[0].covariates.len();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut ids: Vec<String> = Vec::new();
    let mut cohort: Vec<Cohort> = Vec::new();
    let mut exposure: Vec<Option<f64>> = Vec::new();
    let mut t_max: i64 = 0;
    let mut mask_given = false;
    for r in rows {
        if r.covariates.len() != d_x {
            return Err(Error::InvalidPanel("rows disagree on the number of covariates".into()));
        }
        if r.time < 1 {
            return Err(Error::InvalidPanel(format!("time {} is not in 1..=T", r.time)));
        }
        t_max = t_max.max(r.time);
        mask_given |= r.observed.is_some();
        let i = *index.entry(r.unit.as_str()).or_insert_with(|| {
            ids.push(r.unit.clone());
            cohort.push(r.cohort);
            exposure.push(r.exposure);
            ids.len() - 1
        });
        if cohort[i] != r.cohort {
            return Err(Error::InconsistentCohort { unit: r.unit.clone() });
        }
        if exposure[i] != r.exposure {
            return Err(Error::InvalidPanel(format!("unit {} has inconsistent exposure", r.unit)));
        }
        if let Some(d) = r.treated {
            if d != r.cohort.treated_at(r.time as u32) {
                return Err(Error::NonMonotoneTreatment { unit: r.unit.clone(), time: r.time });
            }
        }
    }
    let n = ids.len();
    let periods = t_max as u32;
    let tl = periods as usize;
    let mut y = vec![f64::NAN; n * tl];
    let mut x = vec![0.0; n * tl * d_x];
    let mut observed = vec![false; n * tl];
    let mut seen = vec![false; n * tl];
    for r in rows {
        let i = index[r.unit.as_str()];
        let idx = i * tl + (r.time as usize - 1);
        if seen[idx] {
            return Err(Error::DuplicateCell { unit: r.unit.clone(), time: r.time });
        }
        seen[idx] = true;
        y[idx] = r.outcome;
        x[idx * d_x..(idx + 1) * d_x].copy_from_slice(&r.covariates);
        observed[idx] = r.observed.unwrap_or(true);
    }
    if !mask_given {
        if let Some(idx) = seen.iter().position(|s| !s) {
            return Err(Error::MissingCell { unit: ids[idx / tl].clone(), time: (idx % tl + 1) as i64 });
        }
    }
    let has_exposure = exposure.iter().any(|e| e.is_some());
    if has_exposure && exposure.iter().any(|e| e.is_none()) {
        return Err(Error::InvalidPanel("exposure must be given for every unit or none".into()));
    }

    for c in &cohort {
        if let Cohort::At(g) = c {
            if *g > periods {
                return Err(Error::InvalidPanel(format!(
                    "cohort {g} lies beyond the last period {periods}; encode never-treated as inf"
                )));
            }
        }
    }
    // Support trimming.
    let keep: Vec<usize> = (0..n)
        .filter(|&i| match cohort[i] {
            Cohort::Never => true,
            Cohort::At(g) => g >= 1 && g - 1 >= opts.min_pre && periods + 1 >= g + opts.min_post,
        })
        .collect();
    let trimmed: Vec<String> =
        (0..n).filter(|i| !keep.contains(i)).map(|i| ids[i].clone()).collect();
    if keep.is_empty() {
        return Err(Error::EmptyPanel);
    }
    let pick = |v: &Vec<f64>, w: usize| -> Vec<f64> {
        keep.iter().flat_map(|&i| v[i * w..(i + 1) * w].iter().copied()).collect()
    };
    let y2 = pick(&y, tl);
    let x2 = pick(&x, tl * d_x);
    let obs2: Vec<bool> = keep.iter().flat_map(|&i| observed[i * tl..(i + 1) * tl].iter().copied()).collect();
    let mut p = Panel {
        n: keep.len(),
        periods,
        y: y2,
        cohorts: keep.iter().map(|&i| cohort[i]).collect(),
        d_x,
        x: x2,
        exposure: if has_exposure { Some(keep.iter().map(|&i| exposure[i].unwrap()).collect()) } else { None },
        observed: obs2,
        unit_ids: keep.iter().map(|&i| ids[i].clone()).collect(),
        trimmed,
    };
    p.validate()?;
    p.trimmed.sort();
    Ok(p)
}

/// Event window: ordered relative times `K` with omitted baseline `k0`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventWindow {
    ks: Vec<i64>,
    k0: i64,
}

impl EventWindow {
    pub fn new(mut ks: Vec<i64>, k0: i64) -> Result<EventWindow> {
        ks.sort_unstable();
        ks.dedup();
        if !ks.contains(&k0) {
            return Err(Error::InvalidWindow(format!("baseline {k0} is not in the window")));
        }
        if ks.len() < 2 {
            return Err(Error::InvalidWindow("window needs a relative time besides the baseline".into()));
        }
        Ok(EventWindow { ks, k0 })
    }

    /// Contiguous window `lo..=hi` with baseline `k0`.
    pub fn range(lo: i64, hi: i64, k0: i64) -> Result<EventWindow> {
        EventWindow::new((lo..=hi).collect(), k0)
    }

    /// Every relative time realised by some treated unit of `panel`, baseline −1.
    pub fn saturated(panel: &Panel) -> Result<EventWindow> {
        let t = panel.periods() as i64;
        let mut ks = BTreeSet::new();
        for g in panel.treated_cohorts() {
            for k in cohort_horizons(g, panel.periods()) {
                ks.insert(k);
            }
        }
        ks.insert(-1);
        let ks: Vec<i64> = ks.into_iter().filter(|k| k.abs() < t).collect();
        EventWindow::new(ks, -1)
    }

    pub fn ks(&self) -> &[i64] {
        &self.ks
    }
    pub fn k0(&self) -> i64 {
        self.k0
    }
    /// Relative times carrying a regression column (`K \ {k0}`).
    pub fn columns(&self) -> Vec<i64> {
        self.ks.iter().copied().filter(|&k| k != self.k0).collect()
    }
    pub fn contains(&self, k: i64) -> bool {
        self.ks.binary_search(&k).is_ok()
    }
}

/// `𝒦_g = {−g+1, …, T−g}`: relative times observable for cohort `g`.
pub fn cohort_horizons(g: u32, periods: u32) -> Vec<i64> {
    let (g, t) = (g as i64, periods as i64);
    (1 - g..=t - g).collect()
}

/// `𝒢(k) = {g ∈ 1..=T : 1 ≤ g + k ≤ T}`.
pub fn horizon_cohorts(k: i64, periods: u32) -> Vec<u32> {
    let t = periods as i64;
    (1..=t).filter(|g| g + k >= 1 && g + k <= t).map(|g| g as u32).collect()
}

/// Event-time index of a panel relative to a window.
#[derive(Debug, Clone, PartialEq)]
pub struct EventIndex {
    /// `k(i,t)` in row-major `n x T` order; `None` for never-treated units.
    pub k: Vec<Option<i64>>,
    /// `𝒦_g` for each treated cohort present, intersected with the window.
    pub horizons_by_cohort: BTreeMap<u32, Vec<i64>>,
    /// `𝒢(k)` restricted to cohorts present, for each window time.
    pub cohorts_by_horizon: BTreeMap<i64, Vec<u32>>,
}

pub fn event_index(window: &EventWindow, panel: &Panel) -> EventIndex {
    let periods = panel.periods();
    let mut k = Vec::with_capacity(panel.n() * periods as usize);
    for i in 0..panel.n() {
        for t in 1..=periods {
            k.push(panel.cohort(i).adoption().map(|g| t as i64 - g as i64));
        }
    }
    let present = panel.treated_cohorts();
    let horizons_by_cohort = present
        .iter()
        .map(|&g| {
            let ks = cohort_horizons(g, periods).into_iter().filter(|k| window.contains(*k)).collect();
            (g, ks)
        })
        .collect();
    let cohorts_by_horizon = window
        .ks()
        .iter()
        .map(|&kk| {
            let gs = horizon_cohorts(kk, periods).into_iter().filter(|g| present.contains(g)).collect();
            (kk, gs)
        })
        .collect();
    EventIndex { k, horizons_by_cohort, cohorts_by_horizon }
}

/// Cohort counts, shares and the prevalence path `D̄_t`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignSummary {
    pub counts: BTreeMap<Cohort, usize>,
    pub shares: BTreeMap<Cohort, f64>,
    /// `D̄_t` for `t = 1..=T`.
    pub prevalence: Vec<f64>,
}

pub fn design_summary(panel: &Panel) -> DesignSummary {
    let mut counts: BTreeMap<Cohort, usize> = BTreeMap::new();
    for &c in panel.cohorts() {
        *counts.entry(c).or_default() += 1;
    }
    let n = panel.n() as f64;
    let shares = counts.iter().map(|(c, &m)| (*c, m as f64 / n)).collect();
    let prevalence = (1..=panel.periods())
        .map(|t| {
            counts
                .iter()
                .filter(|(c, _)| c.treated_at(t))
                .map(|(_, &m)| m as f64)
                .sum::<f64>()
                / n
        })
        .collect();
    DesignSummary { counts, shares, prevalence }
}

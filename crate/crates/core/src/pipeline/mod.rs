//! Command orchestration: load or simulate a panel, run the requested
//! analysis, and write every table, plot fragment and the manifest.
//!
//! Outputs depend only on the configuration and seed. Thread count changes
//! wall time, never bytes.

pub mod config;
pub mod output;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;

use serde::Serialize;

use crate::diagnostics::diagnose;
use crate::error::{Error, Result};
use crate::group_time::{aggregate_event_time, aggregation_weights, gatt_table, linear_combination, write_aggregate_csv};
use crate::montecarlo::dgp::{simulate, Design};
use crate::montecarlo::estimators::Estimator;
use crate::montecarlo::runner::{
    mc84_tables, run_grid, violation_grid, write_cells_csv, write_frontier_table, write_placebo_rates,
    write_placebo_table, CellMetrics, IntervalKind, Mc84Tables, RunSettings,
};
use crate::panel::{BuildOptions, Panel};
use crate::sensitivity::{
    breakdown_frontier, calibrate, critical_value, identified_set, write_frontier_csv, DeviationMap, FrontierRow,
    RestrictionClass,
};
use crate::twfe::residualise;

pub use config::{Command, RunConfig};
pub use output::{error_json, verify_manifest, Manifest, OutputDir, PlotPoint};

fn e12(v: f64) -> String {
    format!("{v:.12e}")
}

/// Runs `config.command` and returns the manifest of files written under
/// `config.out`.
pub fn run_pipeline(config: &RunConfig) -> Result<Manifest> {
    config.validate()?;
    let mut out = OutputDir::create(&config.out)?;
    let mut echo = config.clone();
    echo.threads = 0;
    echo.out = ".".into();
    out.write_json("run_config.json", &echo)?;
    match config.command {
        Command::Diagnose => cmd_diagnose(config, &mut out)?,
        Command::Estimate => cmd_estimate(config, &mut out)?,
        Command::Sensitivity => cmd_sensitivity(config, &mut out)?,
        Command::Calibrate => cmd_calibrate(config, &mut out)?,
        Command::Simulate => cmd_simulate(config, &mut out)?,
        Command::Frontier => {
            let tables = frontier_tables(config)?;
            write_tables(&tables, &mut out)?;
        }
    }
    out.finish(config.command.label(), config.seed)
}

fn load_panel(config: &RunConfig) -> Result<Panel> {
    if let Some(path) = &config.panel {
        let f = File::open(path).map_err(|_| Error::InputNotFound(path.display().to_string()))?;
        return Panel::read_csv(f, BuildOptions::default());
    }
    let spec = config.dgp.as_ref().ok_or_else(|| Error::ConfigInvalid("no panel source".into()))?;
    simulate(&spec.clone().with_seed(config.seed))
}

fn settings(config: &RunConfig) -> RunSettings {
    RunSettings { base_seed: config.seed, threads: config.threads, ..config.montecarlo.clone() }
}

fn cmd_diagnose(config: &RunConfig, out: &mut OutputDir) -> Result<()> {
    let panel = load_panel(config)?;
    let window = config.window.window()?;
    let report = diagnose(&panel, &window)?;
    out.write_with("diagnostics.csv", |b| report.write_csv(b))?;
    let rd = residualise(&panel, &window)?;
    out.write_with("weights.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["k", "g", "k_prime", "weight", "in_window"])?;
        for k in window.columns() {
            let Ok(d) = rd.weights(k) else { continue };
            for (inside, map) in [(1, &d.window), (0, &d.outside)] {
                for (&(g, kp), &v) in map {
                    w.write_record([k.to_string(), g.to_string(), kp.to_string(), e12(v), inside.to_string()])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    })?;
    let mut pts = vec![];
    for r in report.rows.iter().filter(|r| r.identified) {
        pts.push(PlotPoint::new(r.k as f64, r.n, "N"));
        pts.push(PlotPoint::new(r.k as f64, r.c, "C"));
    }
    out.write_plot("plot_risk.csv", &pts)
}

fn post_horizons(config: &RunConfig) -> Vec<i64> {
    (config.window.lo.max(0)..=config.window.hi).filter(|&k| k != config.window.k0).collect()
}

fn cmd_estimate(config: &RunConfig, out: &mut OutputDir) -> Result<()> {
    let panel = load_panel(config)?;
    let table = gatt_table(&panel, config.control, config.use_propensity)?;
    let horizons = post_horizons(config);
    let aggs: Vec<_> = horizons.iter().filter_map(|&k| aggregate_event_time(&table, &config.aggregation, k).ok()).collect();
    if aggs.is_empty() {
        return Err(Error::NoCohortsAtHorizon { horizons });
    }
    out.write_with("gatt.csv", |b| table.write_csv(b))?;
    out.write_with("event_study.csv", |b| write_aggregate_csv(b, &aggs))?;
    let fit = residualise(&panel, &config.window.window()?)?.fit(&panel)?;
    out.write_with("twfe.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["k", "estimate", "se"])?;
        for &k in &fit.retained {
            w.write_record([k.to_string(), e12(fit.coefficients[&k]), e12(fit.se[&k])])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let mut pts: Vec<PlotPoint> = aggs.iter().map(|a| PlotPoint::new(a.k as f64, a.estimate, "group-time")).collect();
    pts.extend(fit.retained.iter().map(|&k| PlotPoint::new(k as f64, fit.coefficients[&k], "twfe")));
    out.write_plot("plot_event_study.csv", &pts)
}

#[derive(Serialize)]
struct Target {
    theta: f64,
    se: f64,
    horizons: Vec<i64>,
    /// `(g, t, coefficient)` of the pooled target in the group-time cells.
    coefficients: Vec<(u32, u32, f64)>,
}

/// Equal-weight average of the event-time aggregates over the post horizons
/// of the window.
fn pooled_target(config: &RunConfig, panel: &Panel) -> Result<(Target, DeviationMap)> {
    let table = gatt_table(panel, config.control, config.use_propensity)?;
    let horizons = post_horizons(config);
    let mut used = vec![];
    let mut per_k = vec![];
    for &k in &horizons {
        if let Ok((w, _)) = aggregation_weights(&table, &config.aggregation, k) {
            used.push(k);
            per_k.push((k, w));
        }
    }
    if used.is_empty() {
        return Err(Error::NoCohortsAtHorizon { horizons });
    }
    let mut coefs = BTreeMap::new();
    for (k, w) in per_k {
        for (g, wg) in w {
            *coefs.entry((g, (g as i64 + k) as u32)).or_insert(0.0) += wg / used.len() as f64;
        }
    }
    let (theta, se, _) = linear_combination(&table, &coefs)?;
    let mut map = DeviationMap::new(panel.periods());
    for (&(g, t), &c) in &coefs {
        map = map.with(g, t, c);
    }
    let coefficients = coefs.iter().map(|(&(g, t), &c)| (g, t, c)).collect();
    Ok((Target { theta, se, horizons: used, coefficients }, map))
}

fn cmd_sensitivity(config: &RunConfig, out: &mut OutputDir) -> Result<()> {
    let panel = load_panel(config)?;
    let (target, map) = pooled_target(config, &panel)?;
    let z = critical_value(config.alpha)?;
    let g = &config.grids;
    let ci = |b: f64, gamma: f64, d: f64| -> Result<(f64, f64, f64, f64)> {
        let set = identified_set(target.theta, &map, &RestrictionClass::curvature(b, gamma, d)?)?;
        Ok((set.lower, set.upper, set.lower - z * target.se, set.upper + z * target.se))
    };
    let mut rows = vec![];
    for &d in &g.delta_r {
        for &b in &g.b {
            for &gm in &g.gamma {
                rows.push((b, gm, d, ci(b, gm, d)?));
            }
        }
    }
    out.write_json("target.json", &target)?;
    out.write_with("sensitivity.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["B", "Gamma", "DeltaR", "set_lower", "set_upper", "ci_lower", "ci_upper", "excludes_zero"])?;
        for &(b, gm, d, (sl, su, cl, cu)) in &rows {
            let excl = (cl > 0.0 || cu < 0.0) as u8;
            w.write_record([e12(b), e12(gm), e12(d), e12(sl), e12(su), e12(cl), e12(cu), excl.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let lookup = |b: f64, gm: f64, d: f64| {
        rows.iter()
            .find(|r| r.0 == b && r.1 == gm && r.2 == d)
            .map(|r| (r.3 .2, r.3 .3))
            .unwrap_or((f64::NEG_INFINITY, f64::INFINITY))
    };
    let mut frontier = vec![];
    for &d in &g.delta_r {
        for &b in &g.b {
            let br = breakdown_frontier(&lookup, b, d, &g.gamma)?;
            frontier.push(FrontierRow { b, delta_r: d, gamma_star: br.value, capped: br.capped });
        }
    }
    out.write_with("frontier.csv", |b| write_frontier_csv(b, &frontier))?;
    let pts: Vec<PlotPoint> =
        frontier.iter().map(|f| PlotPoint::new(f.b, f.gamma_star, format!("DeltaR={}", f.delta_r))).collect();
    out.write_plot("plot_frontier.csv", &pts)
}

fn cmd_calibrate(config: &RunConfig, out: &mut OutputDir) -> Result<()> {
    let panel = load_panel(config)?;
    let fit = residualise(&panel, &config.window.window()?)?.fit(&panel)?;
    let pre: BTreeMap<i64, (f64, f64)> =
        fit.retained.iter().filter(|&&k| k < config.window.k0).map(|&k| (k, (fit.coefficients[&k], fit.se[&k]))).collect();
    let post: Vec<i64> = fit.retained.iter().copied().filter(|&k| k >= 0).collect();
    if post.is_empty() {
        return Err(Error::NoCohortsAtHorizon { horizons: post_horizons(config) });
    }
    let tau = post.iter().map(|k| fit.coefficients[k]).sum::<f64>() / post.len() as f64;
    let c = &config.calibration;
    let cal = calibrate(&pre, tau, c.kappa_b, c.c_r, c.eps_tau)?;
    out.write_json("calibration.json", &cal)?;
    out.write_with("calibration_pre.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["k", "estimate", "se"])?;
        for (k, (b, s)) in &pre {
            w.write_record([k.to_string(), e12(*b), e12(*s)])?;
        }
        w.flush()?;
        Ok(())
    })?;
    out.write_with("calibration_grid.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["parameter", "multiplier", "value"])?;
        for (m, v) in &cal.b_grid {
            w.write_record(["B".into(), e12(*m), e12(*v)])?;
        }
        for (m, v) in &cal.delta_grid {
            w.write_record(["DeltaR".into(), e12(*m), e12(*v)])?;
        }
        for p in &cal.gamma_grid {
            w.write_record(["Gamma".into(), e12(*p), e12(p / 100.0 * (tau.abs() + cal.eps_tau))])?;
        }
        w.flush()?;
        Ok(())
    })
}

fn cmd_simulate(config: &RunConfig, out: &mut OutputDir) -> Result<()> {
    let spec = config.dgp.as_ref().expect("validated");
    let g = &config.grids;
    let s = settings(config);
    let cells = run_grid(spec, &violation_grid(&g.delta_r, &g.b, &g.gamma), &s)?;
    write_cells(&cells, &s, out)?;
    if spec.design == Design::Mc84Small {
        let tables = frontier_tables(config)?;
        write_tables(&tables, out)?;
    }
    Ok(())
}

fn write_cells(cells: &[CellMetrics], s: &RunSettings, out: &mut OutputDir) -> Result<()> {
    out.write_with("cells.csv", |b| write_cells_csv(b, cells, &s.interval_alphas))?;
    out.write_with("components.csv", |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["estimator", "DeltaR", "B", "Gamma", "g", "ell", "truth", "bias", "rmse", "medae"])?;
        for c in cells {
            let v = c.violation;
            for m in &c.components {
                w.write_record([
                    c.estimator.label().to_string(),
                    e12(v.delta_r),
                    e12(v.b),
                    e12(v.gamma),
                    m.g.to_string(),
                    m.ell.to_string(),
                    e12(m.truth),
                    e12(m.bias),
                    e12(m.rmse),
                    e12(m.medae),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    if s.estimators.contains(&Estimator::Twfe) {
        out.write_with("association.csv", |buf| {
            let mut w = csv::Writer::from_writer(buf);
            w.write_record(["DeltaR", "B", "Gamma", "corr_n", "corr_c", "slope_n", "slope_c", "replications"])?;
            for c in cells.iter().filter(|c| c.estimator == Estimator::Twfe) {
                let Some(a) = &c.association else { continue };
                let v = c.violation;
                let opt = |x: Option<f64>| x.map(e12).unwrap_or_default();
                w.write_record([
                    e12(v.delta_r),
                    e12(v.b),
                    e12(v.gamma),
                    e12(a.corr_n),
                    e12(a.corr_c),
                    opt(a.slope_n),
                    opt(a.slope_c),
                    a.replications.to_string(),
                ])?;
            }
            w.flush()?;
            Ok(())
        })?;
    }
    let pts: Vec<PlotPoint> = cells
        .iter()
        .filter_map(|c| {
            let m = c.interval(IntervalKind::Robust, 0.05)?;
            let v = c.violation;
            Some(PlotPoint::new(v.gamma, m.coverage, format!("{}|DeltaR={}|B={}", c.estimator.label(), v.delta_r, v.b)))
        })
        .collect();
    out.write_plot("plot_coverage.csv", &pts)
}

fn frontier_tables(config: &RunConfig) -> Result<Mc84Tables> {
    let spec = config.dgp.as_ref().expect("validated");
    mc84_tables(spec, &config.frontier, config.seed, config.threads)
}

fn write_tables(t: &Mc84Tables, out: &mut OutputDir) -> Result<()> {
    out.write_with("placebo_rates.csv", |b| write_placebo_rates(b, &t.rates))?;
    for (j, &b) in t.grid.b.iter().enumerate() {
        out.write_with(&format!("placebo_table_b{j}.csv"), |buf| write_placebo_table(buf, t, b))?;
    }
    out.write_with("frontier_table.csv", |b| write_frontier_table(b, t))?;
    out.write_with("frontier.csv", |b| write_frontier_csv(b, &t.frontier))?;
    let mut pts = vec![];
    for p in t.rates.iter().filter(|p| p.violation.b == t.grid.b[0]) {
        pts.push(PlotPoint::new(p.violation.gamma, p.rates[1], format!("DeltaR={}", p.violation.delta_r)));
    }
    out.write_plot("plot_placebo.csv", &pts)?;
    let pts: Vec<PlotPoint> =
        t.frontier.iter().map(|f| PlotPoint::new(f.b, f.gamma_star, format!("DeltaR={}", f.delta_r))).collect();
    out.write_plot("plot_frontier.csv", &pts)
}

/// Human-readable listing of a manifest.
pub fn print_manifest<W: Write>(mut w: W, m: &Manifest) -> Result<()> {
    writeln!(w, "{}: {} files", m.command, m.files.len())?;
    for f in &m.files {
        writeln!(w, "  {} ({} bytes, sha256 {})", f.path, f.bytes, &f.sha256[..16])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::montecarlo::dgp::DgpSpec;

    fn cfg(command: Command, dgp: DgpSpec, dir: &std::path::Path) -> RunConfig {
        RunConfig { command, dgp: Some(dgp), out: dir.to_path_buf(), ..RunConfig::default() }
    }

    #[test]
    fn every_panel_command_writes_a_verified_manifest() {
        let dgp = DgpSpec::new(Design::Mc81Dgp1).with_n(300);
        for cmd in [Command::Diagnose, Command::Estimate, Command::Sensitivity, Command::Calibrate] {
            let dir = tempfile::tempdir().unwrap();
            let m = run_pipeline(&cfg(cmd, dgp.clone(), dir.path())).unwrap();
            assert!(m.files.len() >= 3, "{cmd:?}");
            assert_eq!(verify_manifest(dir.path()).unwrap(), m);
        }
    }

    #[test]
    fn reruns_are_byte_identical_across_threads() {
        let dgp = DgpSpec::new(Design::Mc84Small).with_n(200);
        let mut c = cfg(Command::Simulate, dgp, std::path::Path::new("."));
        c.montecarlo.replications = 6;
        c.frontier.replications = 10;
        let mut manifests = vec![];
        for threads in [1, 3] {
            let dir = tempfile::tempdir().unwrap();
            c.out = dir.path().to_path_buf();
            c.threads = threads;
            manifests.push(run_pipeline(&c).unwrap());
        }
        assert_eq!(manifests[0], manifests[1]);
        assert!(manifests[0].files.iter().any(|f| f.path == "frontier.csv"));
    }

    #[test]
    fn estimate_without_treated_horizons_reports_them() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = cfg(Command::Estimate, DgpSpec::new(Design::Mc81Dgp1).with_n(200), dir.path());
        // The earliest cohort adopts at 4, so T = 12 reaches event time 8 at most.
        c.window = config::WindowConfig { lo: 9, hi: 11, k0: 9 };
        assert_eq!(run_pipeline(&c).unwrap_err(), Error::NoCohortsAtHorizon { horizons: vec![10, 11] });
        let mut c = cfg(Command::Estimate, DgpSpec::new(Design::Mc81Dgp1), dir.path());
        c.dgp = None;
        c.panel = Some(dir.path().join("missing.csv"));
        assert!(matches!(run_pipeline(&c), Err(Error::InputNotFound(_))));
    }
}

//! Run configuration: one JSON document per run, plus named presets for the
//! simulation designs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::group_time::{AggregationScheme, ControlKind};
use crate::montecarlo::dgp::{DgpSpec, Design};
use crate::montecarlo::estimators::{Estimator, ALL_ESTIMATORS};
use crate::montecarlo::runner::{Mc84Grid, RunSettings};
use crate::panel::EventWindow;
use crate::sensitivity::{C_R_GRID, EPS_TAU, GAMMA_GRID_LEVEL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Diagnose,
    Estimate,
    Sensitivity,
    Calibrate,
    Simulate,
    Frontier,
}

impl Command {
    pub fn label(self) -> &'static str {
        match self {
            Command::Diagnose => "diagnose",
            Command::Estimate => "estimate",
            Command::Sensitivity => "sensitivity",
            Command::Calibrate => "calibrate",
            Command::Simulate => "simulate",
            Command::Frontier => "frontier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub lo: i64,
    pub hi: i64,
    /// Omitted baseline event time.
    pub k0: i64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { lo: -4, hi: 3, k0: -1 }
    }
}

impl WindowConfig {
    pub fn window(&self) -> Result<EventWindow> {
        EventWindow::range(self.lo, self.hi, self.k0)
    }
}

/// Restriction grids `(B, Γ, Δ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Grids {
    pub b: Vec<f64>,
    pub gamma: Vec<f64>,
    pub delta_r: Vec<f64>,
}

impl Default for Grids {
    fn default() -> Self {
        Self { b: vec![0.0, 0.1], gamma: vec![0.0, 0.01], delta_r: vec![0.0, 0.5] }
    }
}

impl Grids {
    /// The violation grid of the staggered designs.
    pub fn full() -> Self {
        Self {
            b: vec![0.0, 0.05, 0.10, 0.20],
            gamma: vec![0.0, 0.005, 0.010, 0.020],
            delta_r: vec![0.0, 0.25, 0.50, 1.00],
        }
    }

    /// The `(B, Γ, Δ)` grid of the two-arm design.
    pub fn two_arm() -> Self {
        Self { b: vec![0.0, 0.5, 1.0, 1.5], gamma: GAMMA_GRID_LEVEL.to_vec(), delta_r: vec![0.0, 0.25, 0.5] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationConfig {
    pub kappa_b: f64,
    pub c_r: f64,
    pub eps_tau: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { kappa_b: 1.0, c_r: C_R_GRID[2], eps_tau: EPS_TAU }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    /// Long-format panel CSV. Exactly one of `panel` and `dgp` is set.
    pub panel: Option<PathBuf>,
    pub dgp: Option<DgpSpec>,
    pub window: WindowConfig,
    pub control: ControlKind,
    pub use_propensity: bool,
    pub aggregation: AggregationScheme,
    pub grids: Grids,
    pub calibration: CalibrationConfig,
    pub montecarlo: RunSettings,
    pub frontier: Mc84Grid,
    pub alpha: f64,
    pub seed: u64,
    /// Worker threads for replication loops; 0 lets rayon choose.
    pub threads: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: Command::Estimate,
            panel: None,
            dgp: None,
            window: WindowConfig::default(),
            control: ControlKind::NeverTreated,
            use_propensity: false,
            aggregation: AggregationScheme::SampleShare,
            grids: Grids::default(),
            calibration: CalibrationConfig::default(),
            montecarlo: RunSettings { replications: 50, ..RunSettings::default() },
            frontier: Mc84Grid::default(),
            alpha: 0.05,
            seed: 20240501,
            threads: 0,
            out: PathBuf::from("out"),
        }
    }
}

/// Names accepted by [`RunConfig::preset`].
pub const PRESETS: [&str; 5] = ["mc81-dgp1", "mc81-dgp2", "mc81-dgp3", "mc84", "mc85"];

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig> {
        serde_json::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|_| Error::InputNotFound(path.display().to_string()))?;
        Self::from_json(&text)
    }

    /// Desk-scale configuration for a named simulation design.
    pub fn preset(name: &str) -> Result<RunConfig> {
        let design = match name {
            "mc84" => Design::Mc84Small,
            "mc85" => Design::Mc85Confounded,
            other => Design::parse(other)?,
        };
        let mut dgp = DgpSpec::new(design);
        let mut c = RunConfig::default();
        match design {
            Design::Mc84Small => c.grids = Grids::two_arm(),
            Design::Mc85Confounded => c.montecarlo.estimators = vec![Estimator::GroupTime, Estimator::DrCrossfit],
            _ => {
                dgp.n = 1000;
                c.montecarlo.estimators = vec![Estimator::GroupTime, Estimator::Twfe];
            }
        }
        c.dgp = Some(dgp);
        Ok(c)
    }

    /// Replaces the violation grid with the design's full grid.
    pub fn with_full_grid(mut self) -> Self {
        let two_arm = matches!(self.dgp.as_ref().map(|d| d.design), Some(Design::Mc84Small));
        self.grids = if two_arm { Grids::two_arm() } else { Grids::full() };
        self.frontier = Mc84Grid::default();
        self
    }

    /// Full replication counts and sample sizes, with every estimator.
    pub fn with_full_scale(mut self) -> Self {
        if let Some(d) = &mut self.dgp {
            let fresh = DgpSpec::new(d.design);
            d.n = fresh.n;
            d.periods = fresh.periods;
        }
        self.montecarlo.replications = 2000;
        self.montecarlo.estimators = ALL_ESTIMATORS.to_vec();
        self
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.panel, &self.dgp) {
            (Some(_), Some(_)) => return Err(Error::ConfigInvalid("set either `panel` or `dgp`, not both".into())),
            (None, None) => return Err(Error::ConfigInvalid("one of `panel` or `dgp` is required".into())),
            _ => {}
        }
        if matches!(self.command, Command::Simulate | Command::Frontier) && self.dgp.is_none() {
            return Err(Error::ConfigInvalid(format!("`{}` needs a `dgp` design", self.command.label())));
        }
        if let Some(d) = &self.dgp {
            d.validate()?;
        }
        for (name, g) in [("b", &self.grids.b), ("gamma", &self.grids.gamma), ("delta_r", &self.grids.delta_r)] {
            if g.is_empty() {
                return Err(Error::ConfigInvalid(format!("grid `{name}` is empty")));
            }
            if g.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(Error::ConfigInvalid(format!("grid `{name}` needs finite nonnegative values")));
            }
        }
        let f = &self.frontier;
        if f.b.is_empty() || f.gamma.is_empty() || f.delta_r.is_empty() || f.replications == 0 {
            return Err(Error::ConfigInvalid("frontier grids and replications must be nonempty".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::ConfigInvalid("alpha must lie in (0, 1)".into()));
        }
        self.window.window()?;
        Ok(())
    }
}

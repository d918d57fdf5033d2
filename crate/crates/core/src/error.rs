//! Crate-wide error type. Every variant knows which module raised it so the
//! CLI can report provenance in its error JSON.

use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    // panel_core
    #[error("panel has no rows")]
    EmptyPanel,
    #[error("duplicate cell: unit {unit} at time {time}")]
    DuplicateCell { unit: String, time: i64 },
    #[error("missing cell: unit {unit} at time {time} (supply an observed mask to allow gaps)")]
    MissingCell { unit: String, time: i64 },
    #[error("unit {unit} has inconsistent cohort values")]
    InconsistentCohort { unit: String },
    #[error("unit {unit}: explicit treatment column contradicts an absorbing path at time {time}")]
    NonMonotoneTreatment { unit: String, time: i64 },
    #[error("invalid panel: {0}")]
    InvalidPanel(String),
    #[error("invalid event window: {0}")]
    InvalidWindow(String),

    // regression_kit
    #[error("design matrix is empty")]
    EmptyDesign,
    #[error("{what} did not converge within {iterations} iterations")]
    NoConvergence { what: String, iterations: usize },
    #[error("logistic fit needs both classes present")]
    SingleClass,
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,

    // twfe_design
    #[error("event window has no columns besides the baseline")]
    EmptyWindow,
    #[error("residualised event design has rank zero")]
    RankZeroDesign,
    #[error("event time {k} was dropped from the design (not identified)")]
    DroppedColumn { k: i64 },

    // diagnostics
    #[error("need at least 3 finite replications, got {got}")]
    TooFewReplications { got: usize },

    // group_time
    #[error("empty control set for cohort {g} at time {t}")]
    EmptyControlSet { g: u32, t: u32 },
    #[error("no observed treated units for cohort {g} at time {t}")]
    EmptyTreatedSet { g: u32, t: u32 },
    #[error("cohort {g} has no base period inside the panel")]
    MissingBasePeriod { g: u32 },
    #[error("propensity overlap failure for cohort {g} at time {t}")]
    PropensityOverlapFailure { g: u32, t: u32 },
    #[error("no cohorts with estimated cells at horizons {horizons:?}")]
    NoCohortsAtHorizon { horizons: Vec<i64> },
    #[error("untreated sample is disconnected: {0}")]
    DisconnectedUntreatedSample(String),
    #[error("effect path has a gap at horizon {k}")]
    GapInPath { k: i64 },
    #[error("exposure weights requested but the panel has none")]
    MissingExposure,

    // orthogonal_scores
    #[error("representer overlap failure for cohort {g} at time {t}")]
    OverlapFailure { g: u32, t: u32 },
    #[error("fold {fold} leaves a cohort without training or evaluation units")]
    FoldCohortStarvation { fold: usize },

    // sensitivity
    #[error("calibration needs at least 2 pre-period coefficients, got {got}")]
    TooFewPrePeriods { got: usize },
    #[error("grid is empty")]
    EmptyGrid,
    #[error("baseline cell (0,0,0) is missing from the grid")]
    MissingBaseline,
    #[error("invalid input: {0}")]
    InvalidInput(String),

    // montecarlo
    #[error("operation does not support design {0}")]
    UnsupportedSpec(String),
    #[error("placebo test needs more pre-periods: {0}")]
    InsufficientPrePeriods(String),

    // cli_reports
    #[error("invalid configuration: {0}")]
    ConfigInvalid(String),
    #[error("input not found: {0}")]
    InputNotFound(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl Error {
    /// Name of the module that owns this error kind.
    pub fn module(&self) -> &'static str {
        use Error::*;
        match self {
            EmptyPanel | DuplicateCell { .. } | MissingCell { .. } | InconsistentCohort { .. }
            | NonMonotoneTreatment { .. } | InvalidPanel(_) | InvalidWindow(_) => "panel_core",
            EmptyDesign | NoConvergence { .. } | SingleClass | Infeasible | Unbounded => {
                "regression_kit"
            }
            EmptyWindow | RankZeroDesign | DroppedColumn { .. } => "twfe_design",
            TooFewReplications { .. } => "diagnostics",
            EmptyControlSet { .. } | EmptyTreatedSet { .. } | MissingBasePeriod { .. }
            | PropensityOverlapFailure { .. } | NoCohortsAtHorizon { .. }
            | DisconnectedUntreatedSample(_) | GapInPath { .. } | MissingExposure => "group_time",
            OverlapFailure { .. } | FoldCohortStarvation { .. } => "orthogonal_scores",
            TooFewPrePeriods { .. } | EmptyGrid | MissingBaseline | InvalidInput(_) => {
                "sensitivity"
            }
            UnsupportedSpec(_) | InsufficientPrePeriods(_) => "montecarlo",
            ConfigInvalid(_) | InputNotFound(_) | Io(_) => "cli_reports",
        }
    }

    /// Stable variant name, used as the `kind` field of error JSON.
    pub fn kind(&self) -> &'static str {
        use Error::*;
        match self {
            EmptyPanel => "EmptyPanel",
            DuplicateCell { .. } => "DuplicateCell",
            MissingCell { .. } => "MissingCell",
            InconsistentCohort { .. } => "InconsistentCohort",
            NonMonotoneTreatment { .. } => "NonMonotoneTreatment",
            InvalidPanel(_) => "InvalidPanel",
            InvalidWindow(_) => "InvalidWindow",
            EmptyDesign => "EmptyDesign",
            NoConvergence { .. } => "NoConvergence",
            SingleClass => "SingleClass",
            Infeasible => "Infeasible",
            Unbounded => "Unbounded",
            EmptyWindow => "EmptyWindow",
            RankZeroDesign => "RankZeroDesign",
            DroppedColumn { .. } => "DroppedColumn",
            TooFewReplications { .. } => "TooFewReplications",
            EmptyControlSet { .. } => "EmptyControlSet",
            EmptyTreatedSet { .. } => "EmptyTreatedSet",
            MissingBasePeriod { .. } => "MissingBasePeriod",
            PropensityOverlapFailure { .. } => "PropensityOverlapFailure",
            NoCohortsAtHorizon { .. } => "NoCohortsAtHorizon",
            DisconnectedUntreatedSample(_) => "DisconnectedUntreatedSample",
            GapInPath { .. } => "GapInPath",
            MissingExposure => "MissingExposure",
            OverlapFailure { .. } => "OverlapFailure",
            FoldCohortStarvation { .. } => "FoldCohortStarvation",
            TooFewPrePeriods { .. } => "TooFewPrePeriods",
            EmptyGrid => "EmptyGrid",
            MissingBaseline => "MissingBaseline",
            InvalidInput(_) => "InvalidInput",
            UnsupportedSpec(_) => "UnsupportedSpec",
            InsufficientPrePeriods(_) => "InsufficientPrePeriods",
            ConfigInvalid(_) => "ConfigInvalid",
            InputNotFound(_) => "InputNotFound",
            Io(_) => "Io",
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Io(e.to_string())
    }
}

//! Numerical kernel shared by the estimators.

pub mod demean;
pub mod logit;
pub mod lp;
pub mod lstsq;

pub use demean::{twoway_demean, DEMEAN_TOL};
pub use logit::{fit_logit, fit_multinomial_ovr, predict_logit, predict_multinomial, sigmoid, LogitFit, LOGIT_RIDGE};
pub use lp::{solve_lp, Constraint, Direction, LpProblem, LpSolution, Sense};
pub use lstsq::{least_squares, LinearSystemResult};

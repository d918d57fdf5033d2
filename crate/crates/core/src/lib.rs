//! Staggered-adoption difference-in-differences toolkit.

pub mod error;
pub mod panel;
pub mod regression;
pub mod twfe;
pub mod diagnostics;
pub mod group_time;
pub mod montecarlo;
pub mod orthogonal;
pub mod sensitivity;
pub mod pipeline;

pub use error::{Error, Result};

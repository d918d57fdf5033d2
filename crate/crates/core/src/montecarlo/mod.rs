//! Simulation designs, truths, placebo tests, metrics and the replication
//! loop.

pub mod dgp;
pub mod estimators;
pub mod placebo;
pub mod runner;
pub mod rng;

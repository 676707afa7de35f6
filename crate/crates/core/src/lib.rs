//! Failure-probability estimation for expensive models by subset simulation
//! with multifidelity active learning.

pub mod cli;
pub mod distributions;
pub mod estimators;
pub mod gp;
pub mod learning;
pub mod models;
pub mod subsim;

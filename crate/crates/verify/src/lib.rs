//! Experiment drivers, reports and the command-line front end.

pub mod config;
pub mod error;
pub mod fields;
pub mod lacunary;
pub mod theorem12;
pub mod theorem14;
pub mod hypotheses;
pub mod theorem16;
pub mod stability;
pub mod report;
pub mod suites;

//! Experiment runner for detection-guided IR-to-RGB translation.
//!
//! An [`spec::ExperimentSpec`] names one command plus every data, model and
//! training setting. [`run::Runner`] executes it once per seed, stores one
//! [`rows::MetricRow`] per measurement and rebuilds the summary tables.

pub mod error;
pub mod panel;
pub mod rows;
pub mod run;
pub mod spec;

pub use error::{CliError, CliResult};
pub use rows::{MetricRow, SummaryRow};
pub use run::{RunOutcome, Runner};
pub use spec::{Command, ExperimentSpec};

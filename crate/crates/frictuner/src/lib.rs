//! Experiment harness around `frictuner-core`: configuration files and
//! presets, data loading, run orchestration and CSV/JSON reporting.

pub mod config;
pub mod data;
pub mod error;
pub mod gamma;
pub mod presets;
pub mod problem;
pub mod report;
pub mod run;

pub use config::{ExperimentConfig, Mode};
pub use error::{HarnessError, Result};
pub use run::{run, RunContext, RunOutcome};

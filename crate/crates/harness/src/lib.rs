//! Experiment harness: config files, the pipeline stages, the method ladder,
//! ablations and similarity dumps, plus the `otdistill` command line.

pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod workers;

pub use config::{DataSource, ExperimentConfig};
pub use error::{HarnessError, Result};
pub use experiments::Method;
pub use otdistill_core::metrics::{compute_metrics, MetricReport};

//! Benchmark harness for the word-count workload: sweep word counts across
//! transports, time each complete request, persist CSV, and render a
//! comparison table against the published reference numbers.

pub mod records;
pub mod summarize;
pub mod sweep;

pub use records::{export_csv, import_csv, render_plot_data, BenchRecord, Outcome};
pub use summarize::{summarize, Summary, REFERENCE_TABLE};
pub use sweep::{run_sweep, SweepPlan};

use thiserror::Error;

/// Harness faults. Per-trial failures are captured in [`BenchRecord`]
/// outcomes instead and never abort a sweep.
#[derive(Debug, Error)]
pub enum BenchError {
    #[error("invalid sweep plan: {0}")]
    BadPlan(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(String),
    #[error("workload: {0}")]
    Workload(String),
}

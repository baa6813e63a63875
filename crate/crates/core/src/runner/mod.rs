//! Experiment orchestration: configuration, backend wiring, the evaluation
//! loop, sweeps, dataset verification and report rendering.
//!
//! Items are evaluated on a bounded thread pool; results are sorted by item
//! id before anything is aggregated, so reports do not depend on scheduling.

mod backend;
mod config;
mod eval;
mod probe_run;
mod report;
mod sweep;
mod verify;

use thiserror::Error;

pub use backend::{Backends, API_KEY_ENV};
pub use config::{parse_ratio, BackendSpec, BackendsConfig, ExperimentConfig, MixConfig, Mode, USUAL_DEMOS, USUAL_K};
pub use eval::{
    aggregate, evaluate_item, held_out_demos, prepare, run_experiment, run_items, AggregateTable, DocRef, EvalContext, ItemMetrics,
    ItemRecord, MemoryOutcome, RunReport, RunStatus, Timing,
};
pub use probe_run::{induce_all, probe_all, ProbeRun};
pub use report::{emit_report, probe_markdown, render_csv, render_markdown, ReportFormat, TABLE_COLUMNS};
pub use sweep::{expand_sweep, SweepAxes, SweepFile, SweepRun};
pub use verify::{verify_dataset, verify_inputs, Diagnostics, Violation};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("backend: {0}")]
    Backend(String),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error(transparent)]
    Jsonl(#[from] crate::jsonl::JsonlError),
    #[error(transparent)]
    Probe(#[from] crate::probe::ProbeError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("thread pool: {0}")]
    Pool(String),
}

/// Maps `f` over `items` on a dedicated pool of `workers` threads, keeping input order.
pub fn par_map<T, R, F>(workers: usize, items: &[T], f: F) -> Result<Vec<R>, RunError>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| RunError::Pool(e.to_string()))?;
    Ok(pool.install(|| items.par_iter().map(f).collect()))
}

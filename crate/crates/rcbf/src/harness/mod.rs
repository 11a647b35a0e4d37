//! Configuration ingestion, batch execution and trace/summary emission.

pub mod batch;
pub mod config;
pub mod csv;

pub use batch::{
    bounds_probe, exit_code, run_and_summarise, run_batch, run_seed, trace_stats, BatchReport, FailureKind,
    ProbeReport, RunSummary, TraceStats, EPS_NUM, EXIT_CONFIG, EXIT_OK, EXIT_SAFETY, EXIT_SCENARIO_FAULT,
};
pub use config::{load_config, parse_seeds, ConfigFile, DrawPolicy, Mode, RunConfig, ScenarioKind, ScenarioParams};
pub use csv::{emit_trace, git_blob_hash, parse_trace_csv, read_trace, trace_to_csv};

//! Experiment driver around `specq-core`: toy-model checkpoints, seeded
//! decode benchmarks over a prompt corpus, cost-model sweeps, and CSV
//! regression comparison. The `specq` binary is a thin shell over this
//! library so every behaviour stays testable in-process.

pub mod bench;
pub mod compare;
pub mod config;
pub mod sweep;

pub use bench::{
    csv_bytes, ingest_prompts, run_bench, BenchOptions, BenchReport, BenchRow, PromptRecord,
    Strategy, CSV_HEADER,
};
pub use compare::{compare_report, read_csv, CompareReport};
pub use config::sibling;
pub use sweep::{run_cost_sweep, SweepOutput};

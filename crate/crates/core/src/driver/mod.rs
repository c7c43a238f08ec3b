//! End-to-end orchestration: configuration, persistence, reporting and the
//! progressive compression pipeline.

pub mod checkpoint;
pub mod config;
mod pipeline;
pub mod report;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DataConfig, RunConfig};
pub use pipeline::{
    load_data, purify_phase, run_autocompress, train_baseline, train_from_scratch, verify_report, RunOptions,
    RunOutcome, StopReason,
};
pub use report::{Phase, ReportRow, RunReport};

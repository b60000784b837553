//! Benchmark harness for the SCM acceleration library: runs a seeded toy
//! denoiser in dense or accelerated modes, compares against the dense run
//! and writes JSON/CSV reports.

pub mod config;
pub mod report;
pub mod run;

pub use config::{parse_config, ConfigPatch, Mode, RunConfig};
pub use report::{emit_report, strip_timing, RunReport};
pub use run::{run_benchmark, run_sweep, RunOutcome};

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("invalid value for `{key}`: {msg}")]
    Usage { key: String, msg: String },

    #[error(transparent)]
    Run(#[from] scm_accel::Error),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl BenchError {
    /// Process exit code: 2 for usage errors, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Usage { .. } => 2,
            _ => 1,
        }
    }
}

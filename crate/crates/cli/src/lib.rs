//! `conkd` command line: corpus generation, training, evaluation, ablations,
//! benchmarking and the chat service.

pub mod args;
pub mod commands;
pub mod serve;

pub use args::Cli;
pub use commands::run;

/// One-line JSON error record printed on failure.
pub fn error_line(kind: &str, message: &str) -> String {
    serde_json::json!({ "error": kind, "message": message.replace('\n', " ") }).to_string()
}

//! Batch front door for the factor-model pipeline: configuration and CSV
//! ingestion, orchestration of preprocess -> select -> fit -> decompose, and
//! emission of plot-ready output files with a machine-readable manifest.

pub mod config;
pub mod csvio;
pub mod manifest;
pub mod pipeline;

use std::fmt;

/// Pipeline stages, in execution order. Each failing stage maps to its own
/// exit code so batch callers can tell apart configuration problems, bad
/// inputs, and numerical failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Preprocess,
    Select,
    Fit,
    Decompose,
    Report,
}

impl Stage {
    pub fn exit_code(self) -> i32 {
        match self {
            Stage::Config => 2,
            Stage::Ingest => 3,
            Stage::Preprocess => 4,
            Stage::Select => 5,
            Stage::Fit => 6,
            Stage::Decompose => 7,
            Stage::Report => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Preprocess => "preprocess",
            Stage::Select => "select",
            Stage::Fit => "fit",
            Stage::Decompose => "decompose",
            Stage::Report => "report",
        }
    }
}

/// A pipeline failure carrying the stage it happened in.
#[derive(Debug)]
pub struct CliError {
    pub stage: Stage,
    pub message: String,
}

impl CliError {
    pub fn new(stage: Stage, message: impl Into<String>) -> Self {
        CliError {
            stage,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}", self.stage.name(), self.message)
    }
}

impl std::error::Error for CliError {}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Shorthand for wrapping core errors with their stage.
pub fn at_stage<T, E: fmt::Display>(stage: Stage, r: std::result::Result<T, E>) -> CliResult<T> {
    r.map_err(|e| CliError::new(stage, e.to_string()))
}

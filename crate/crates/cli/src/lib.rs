//! Command-line front end for the `nvdephase` simulator: configuration,
//! simulation runs, fitting reports, the oracle check suite and SVG plots.

pub mod commands;
pub mod config;
pub mod svg;
pub mod validate;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad or unreadable configuration. Exit code 2.
    #[error("configuration error: {0}")]
    Config(String),
    /// The numerics refused to run (step too large, non-finite state). Exit code 3.
    #[error("numeric refusal: {0}")]
    Numeric(String),
    #[error("{0}")]
    Failed(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Failed(_) | CliError::Io(_) => 1,
        }
    }
}

impl From<nvdephase::Error> for CliError {
    fn from(e: nvdephase::Error) -> Self {
        use nvdephase::Error as E;
        match e {
            E::StepTooLarge { .. } | E::NonFinite(_) | E::Unphysical(_) => CliError::Numeric(e.to_string()),
            E::InvalidParameter { .. }
            | E::InvalidConfig(_)
            | E::EngineMismatch(_)
            | E::InvalidSpinProjection(_)
            | E::InvalidGate(_) => CliError::Config(e.to_string()),
            _ => CliError::Failed(e.to_string()),
        }
    }
}

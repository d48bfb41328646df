//! Experiment driver: configuration, data synthesis, inversions, realisations and
//! constant-ℓ baselines, all writing plot-ready CSV plus a JSON manifest.

pub mod commands;
pub mod config;
pub mod gnuplot;
pub mod output;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl From<matern_hyper::Error> for CliError {
    fn from(e: matern_hyper::Error) -> Self {
        use matern_hyper::Error as E;
        match e {
            E::Io(io) => CliError::Io(io),
            E::InvalidGrid(_)
            | E::GridMismatch(_)
            | E::IndexOutOfBounds { .. }
            | E::InvalidParameter(_)
            | E::Parse(_)
            | E::SizeGuard { .. } => CliError::Config(e.to_string()),
            E::NonPositiveLengthScale { .. } | E::Singular(_) | E::Numerical(_) => {
                CliError::Numerical(e.to_string())
            }
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

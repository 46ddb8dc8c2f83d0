//! Command implementations behind the `neuralmd` binary.

pub mod commands;
pub mod config;

use neuralmd_core::autodiff::AutodiffError;
use neuralmd_core::io::IoError;
use neuralmd_core::physics::PhysicsError;
use neuralmd_core::spectral::SpectralError;
use neuralmd_core::training::TrainError;

pub use commands::{cmd_baseline, cmd_convergence, cmd_diagnose, cmd_evaluate, cmd_reference, cmd_train, StageSel};
pub use config::RunConfig;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{0}")]
    Structural(String),
    #[error("numeric abort: {0}")]
    Numeric(String),
    #[error("time step {dt} does not resolve the fast scale; need dt <= {required}")]
    Resolution { dt: f64, required: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Structural(_) | CliError::Io(_) => 2,
            CliError::Numeric(_) => 3,
            CliError::Resolution { .. } => 4,
        }
    }
}

impl From<SpectralError> for CliError {
    fn from(e: SpectralError) -> Self {
        match e {
            SpectralError::Resolution { dt, required } => CliError::Resolution { dt, required },
            SpectralError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            SpectralError::Data(_) => CliError::Config(e.to_string()),
            SpectralError::Structural(_) => CliError::Structural(e.to_string()),
        }
    }
}

impl From<PhysicsError> for CliError {
    fn from(e: PhysicsError) -> Self {
        match e {
            PhysicsError::Spectral(s) => (*s).into(),
            PhysicsError::Invalid(_) | PhysicsError::Data(_) => CliError::Config(e.to_string()),
            other => CliError::Structural(other.to_string()),
        }
    }
}

impl From<AutodiffError> for CliError {
    fn from(e: AutodiffError) -> Self {
        match e {
            AutodiffError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            AutodiffError::Structural(_) => CliError::Structural(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Autodiff(a) => a.into(),
            TrainError::Physics(p) => p.into(),
            TrainError::Spectral(s) => s.into(),
            TrainError::Config(m) => CliError::Config(m),
            TrainError::Structural(m) => CliError::Structural(m),
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
        }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        CliError::Structural(e.to_string())
    }
}

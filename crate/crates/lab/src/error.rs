use std::path::{Path, PathBuf};

use thiserror::Error;
use vgrpo_core::flow::FlowError;
use vgrpo_core::grpo::GrpoError;
use vgrpo_core::rewards::RewardError;
use vgrpo_core::sampler::SamplerError;
use vgrpo_core::surrogate::SurrogateError;
use vgrpo_core::tensor::TensorError;

#[derive(Debug, Error)]
pub enum LabError {
    #[error("config error: {0}")]
    Config(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl LabError {
    /// Process exit status for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Config(_) => 2,
            LabError::Numeric(_) => 3,
            LabError::Io { .. } => 1,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

impl From<GrpoError> for LabError {
    fn from(e: GrpoError) -> Self {
        if e.is_numeric() {
            LabError::Numeric(e.to_string())
        } else {
            LabError::Config(e.to_string())
        }
    }
}

impl From<TensorError> for LabError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFiniteGradient(_) => LabError::Numeric(e.to_string()),
            _ => LabError::Config(e.to_string()),
        }
    }
}

impl From<FlowError> for LabError {
    fn from(e: FlowError) -> Self {
        LabError::Config(e.to_string())
    }
}

impl From<SamplerError> for LabError {
    fn from(e: SamplerError) -> Self {
        LabError::Config(e.to_string())
    }
}

impl From<RewardError> for LabError {
    fn from(e: RewardError) -> Self {
        LabError::Config(e.to_string())
    }
}

impl From<SurrogateError> for LabError {
    fn from(e: SurrogateError) -> Self {
        match e {
            SurrogateError::NonFinite(_) => LabError::Numeric(e.to_string()),
            _ => LabError::Config(e.to_string()),
        }
    }
}

pub type Result<T, E = LabError> = std::result::Result<T, E>;

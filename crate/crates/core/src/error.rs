use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("validation failed for {entry}: {reason}")]
    Validation { entry: String, reason: String },

    #[error("cannot decode {path}: {reason}")]
    Decode { path: PathBuf, reason: String },

    #[error("sequence {sequence_id} has {available} frames, clip needs {required}")]
    Length {
        sequence_id: String,
        available: usize,
        required: usize,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("unknown {kind} label {label:?}")]
    Vocabulary { kind: &'static str, label: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("non-finite value at timestep {t}: {detail}")]
    Numeric { t: usize, detail: String },

    #[error("training diverged at step {step} (t = {timesteps:?}, parameter norm {param_norm:.4e}): loss {loss}")]
    Diverged {
        step: u64,
        timesteps: Vec<usize>,
        param_norm: f64,
        loss: f64,
    },

    #[error("pairing failed, synthetic identities missing from the real set: {0:?}")]
    Pairing(Vec<usize>),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("external embedder failed: {0}")]
    Embedder(String),

    #[error("tensor backend: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Checkpoint {
            path: path.into(),
            reason: reason.to_string(),
        }
    }

    pub fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Short stable tag used in machine-parsable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Load { .. } => "load",
            Error::Validation { .. } => "validation",
            Error::Decode { .. } => "decode",
            Error::Length { .. } => "length",
            Error::Parameter(_) => "parameter",
            Error::Shape { .. } => "shape",
            Error::Vocabulary { .. } => "vocabulary",
            Error::Config(_) => "config",
            Error::Numeric { .. } => "numeric",
            Error::Diverged { .. } => "diverged",
            Error::Pairing(_) => "pairing",
            Error::Checkpoint { .. } => "checkpoint",
            Error::Embedder(_) => "embedder",
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
        }
    }

    /// Process exit code for this error class. Kept in sync with the table in `--help`.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Load { .. } => 3,
            Error::Validation { .. } => 4,
            Error::Decode { .. } => 5,
            Error::Length { .. } => 6,
            Error::Parameter(_) => 7,
            Error::Shape { .. } => 8,
            Error::Vocabulary { .. } => 9,
            Error::Numeric { .. } => 10,
            Error::Diverged { .. } => 11,
            Error::Pairing(_) => 12,
            Error::Checkpoint { .. } => 13,
            Error::Embedder(_) => 14,
            Error::Tensor(_) => 15,
            Error::Io(_) => 16,
        }
    }
}

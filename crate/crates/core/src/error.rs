use thiserror::Error;

/// Errors raised by the workbench library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("motor state ({theta1:.4}, {theta2:.4}) outside workspace [-{theta_max}, {theta_max}]")]
    Workspace {
        theta1: f64,
        theta2: f64,
        theta_max: f64,
    },

    #[error("target index {index} out of range for scene with {count} targets")]
    TargetIndex { index: usize, count: usize },

    #[error("invalid scene: {0}")]
    Scene(String),

    #[error("oracle cannot make progress: target out of view for every candidate action")]
    NoProgress,

    #[error("degenerate circle fit: {0}")]
    DegenerateFit(String),

    #[error("invalid marker set: {0}")]
    Markers(String),

    #[error("bounding box {0:?} outside the [0, {1}) coordinate range")]
    BoxRange([u32; 4], u32),

    #[error("output shape mismatch: {0}")]
    OutputShape(String),

    #[error("policy dimension mismatch: {0}")]
    Dimension(String),

    #[error("non-finite value during training: {0}")]
    NonFinite(String),

    #[error("checkpoint rejected: {0}")]
    Checkpoint(String),

    #[error("refusing to start reinforcement fine-tuning from an untrained policy; enable the cold-start override to proceed")]
    ColdStart,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

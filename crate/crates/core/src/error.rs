use thiserror::Error;

/// Errors produced anywhere in the tracking stack.
#[derive(Debug, Error)]
pub enum TrackError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("singular ground projection (|det| = {det:e})")]
    SingularProjection { det: f64 },

    #[error("point ({x:.3}, {y:.3}) lies outside the grid extent")]
    OutOfExtent { x: f64, y: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing motion estimate for trajectory {trajectory} at lag {lag}")]
    MissingMotion { trajectory: usize, lag: usize },

    #[error("frame misalignment: {0}")]
    FrameMisalignment(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl TrackError {
    /// Short machine-readable tag for the error variant.
    pub fn kind(&self) -> &'static str {
        match self {
            TrackError::InvalidConfig(_) => "invalid_config",
            TrackError::ShapeMismatch(_) => "shape_mismatch",
            TrackError::SingularProjection { .. } => "singular_projection",
            TrackError::OutOfExtent { .. } => "out_of_extent",
            TrackError::NonFinite(_) => "non_finite",
            TrackError::MissingMotion { .. } => "missing_motion",
            TrackError::FrameMisalignment(_) => "frame_misalignment",
            TrackError::Diverged { .. } => "diverged",
            TrackError::Parse(_) => "parse",
            TrackError::Io(_) => "io",
            TrackError::Csv(_) => "csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, TrackError>;

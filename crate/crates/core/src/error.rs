use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the reconstruction pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {actual})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("corrupt file: {0}")]
    CorruptFile(String),

    #[error("degenerate one-ring at {} vertices (first: {:?})", .vertices.len(), .vertices.first())]
    DegenerateNormals { vertices: Vec<usize> },

    #[error("point behind camera (camera depth {depth} mm)")]
    BehindCamera { depth: f64 },

    #[error("invalid camera pose: {0}")]
    InvalidPose(String),

    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("render produced no visible triangles")]
    EmptyRender,

    #[error("no residuals: {0}")]
    EmptyResidual(&'static str),

    #[error("under-constrained: {available} visible landmarks, need at least {required}")]
    UnderConstrained { available: usize, required: usize },

    #[error("pre-alignment failed: rms reprojection {rms_px:.3} px")]
    PrealignFailed { rms_px: f64 },

    #[error("solver failure: {0}")]
    SolverFailure(String),

    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),

    #[error("alignment failed: {0}")]
    AlignmentFailed(String),

    #[error("empty mesh")]
    EmptyMesh,

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

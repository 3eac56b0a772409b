use thiserror::Error;

#[derive(Debug, Error)]
pub enum DneError {
    #[error("underdetermined: camera correction needs at least 2 correspondences, got {0}")]
    Underdetermined(usize),
    #[error("singular system: ridge design is rank deficient (|det| = {0:e})")]
    SingularSystem(f64),
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("non-finite value in stage {stage}, step `{step}`")]
    NonFinite { stage: usize, step: &'static str },
    #[error("invalid mesh: {0}")]
    InvalidMesh(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad container: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = DneError> = std::result::Result<T, E>;

impl DneError {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        DneError::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

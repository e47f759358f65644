use thiserror::Error;

#[derive(Error, Debug)]
pub enum GeoError {
    /// Shape mismatch between tensors taking part in one operation.
    #[error("dimension error: {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: String,
        actual: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed dataset / checkpoint file; `offset` is the byte at which
    /// parsing failed.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("training diverged: non-finite loss at epoch {epoch}, batch {batch} (lr {lr})")]
    Diverged { epoch: usize, batch: usize, lr: f32 },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, GeoError>;

impl GeoError {
    pub fn dim(context: impl Into<String>, expected: impl Into<String>, actual: impl Into<String>) -> Self {
        GeoError::Dimension {
            context: context.into(),
            expected: expected.into(),
            actual: actual.into(),
        }
    }
}

use thiserror::Error;

/// Errors surfaced by the tensor engine, the flow pipeline and the tools around it.
#[derive(Debug, Error)]
pub enum DiclError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, DiclError>;

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::DiclError::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;

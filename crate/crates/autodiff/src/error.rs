use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("invalid parameter for {op}: {detail}")]
    Param { op: &'static str, detail: String },
    #[error("validation error in {op}: {detail}")]
    Validation { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(AutodiffError::Shape { op, detail: detail.into() })
}

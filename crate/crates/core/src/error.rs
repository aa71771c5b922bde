use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the core crate.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid shape spec: {0}")]
    InvalidShape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("empty batch passed to {0}")]
    EmptyBatch(&'static str),
    #[error("row {row} of the label matrix is not one-hot")]
    NotOneHot { row: usize },
    #[error("single-class input: {0}")]
    SingleClass(&'static str),
    #[error("missing loss component `{0}`")]
    MissingComponent(String),
    #[error("non-finite value in loss component `{0}`")]
    NonFinite(String),
    #[error("invalid topology: {0}")]
    InvalidTopology(String),
    #[error("value {value} out of range for {name}")]
    OutOfRange { name: &'static str, value: f64 },
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_mismatch(context: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::ShapeMismatch {
        context,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the generator, trainer and metrics.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    Shape {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("non-finite {name} = {value} at step {step}")]
    NonFinite { step: u64, name: String, value: f64 },
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("architecture mismatch: {0}")]
    Architecture(String),
    #[error("out of bounds: {0}")]
    OutOfBounds(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, expected: &[usize], actual: &[usize]) -> Error {
    Error::Shape {
        op,
        expected: expected.to_vec(),
        actual: actual.to_vec(),
    }
}

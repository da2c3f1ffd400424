use alloc::boxed::Box;
use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("corpus contains unsupported bytes: {bytes:02x?}")]
    UnsupportedChars { bytes: Vec<u8> },
    #[error("context overflow: {needed} positions needed, limit is {limit}")]
    ContextOverflow { needed: usize, limit: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("non-finite {what} at position {position}")]
    NonFinite { what: &'static str, position: usize },
    #[error("grounding violation: {0}")]
    Grounding(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("both classes are required, got a single class")]
    SingleClass,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),
    #[error("insufficient data: need {needed}, have {available}")]
    Insufficient { needed: usize, available: usize },
    #[error("training diverged at step {step} (loss is not finite)")]
    Diverged { step: usize },
    #[error("unknown variant: {0}")]
    UnknownVariant(String),
    #[error("item {index}: {error}")]
    Item { index: usize, error: Box<Error> },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub fn at(index: usize, error: Error) -> Self {
        Error::Item { index, error: Box::new(error) }
    }
}

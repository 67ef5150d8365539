use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised by the numeric engine and the models built on it.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("loss node must be scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("item id {id} is out of vocabulary (size {vocab})")]
    OutOfVocabulary { id: usize, vocab: usize },
    #[error("item {0} has not been synced to the device embedding slice")]
    NotOnDevice(u32),
    #[error("{0} requires a non-empty sequence")]
    EmptySequence(&'static str),
    #[error("label must be 0 or 1, got {0}")]
    InvalidLabel(f64),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("fragment has {0} parameters; gradient checks are limited to fewer than 10000")]
    FragmentTooLarge(usize),
    #[error("no device state for user {0}")]
    UnknownUser(u32),
    #[error("non-finite loss during {context}")]
    NonFiniteLoss { context: String },
}

use scicore_autograd::TensorError;
use scicore_chem::SmilesError;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid SMILES `{text}`: {source}")]
    InvalidSmiles { text: String, source: SmilesError },
    #[error("conformer has {coords} coordinates for {atoms} atoms")]
    ConformerMismatch { atoms: usize, coords: usize },
    #[error("cannot pool an empty graph")]
    EmptyGraph,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("token id {id} outside vocabulary of {vocab}")]
    VocabOverflow { id: usize, vocab: usize },
    #[error("character {ch:?} at offset {offset} is not in the vocabulary")]
    UnknownCharacter { ch: char, offset: usize },
    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("empty input")]
    EmptyInput,
    #[error("invalid schedule range: {0}")]
    InvalidRange(String),
    #[error("step {step} outside 0..={max}")]
    StepOutOfRange { step: usize, max: usize },
    #[error("SMILES `{text}` longer than latent length {max}")]
    TooLong { text: String, max: usize },
    #[error("unknown role `{0}`")]
    UnknownRole(String),
    #[error("index {index} out of range for {len} items")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("mask selects no molecule")]
    EmptyMask,
    #[error("retrieval library is empty")]
    EmptyLibrary,
    #[error("value {0} outside [0, 100]")]
    OutOfRange(f64),
    #[error("unknown task type `{0}`")]
    UnknownTaskType(String),
    #[error("every parameter is frozen")]
    FrozenAllParams,
    #[error("invalid reaction record: {0}")]
    InvalidRecord(String),
    #[error("record line {line}: {reason}")]
    Record { line: usize, reason: String },
    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

pub(crate) fn smiles_err(text: &str) -> impl FnOnce(SmilesError) -> ModelError + '_ {
    move |source| ModelError::InvalidSmiles {
        text: text.to_string(),
        source,
    }
}

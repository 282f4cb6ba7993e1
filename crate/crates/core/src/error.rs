use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("fully masked row {row}")]
    FullyMaskedRow { row: usize },

    #[error("invalid block size")]
    InvalidBlockSize,

    #[error("undefined similarity: zero vector")]
    UndefinedSimilarity,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("empty window")]
    EmptyWindow,

    #[error("empty selection: rho must be in (0, 1], got {0}")]
    EmptySelection(f64),

    #[error("empty head dimension")]
    EmptyHeadDimension,

    #[error("pattern already captured")]
    PatternAlreadyCaptured,

    #[error("mask shape mismatch: mask covers {mask_len} tokens, inputs have {input_len}")]
    MaskShapeMismatch { mask_len: usize, input_len: usize },

    #[error("step {step} out of range 1..={total}")]
    StepOutOfRange { step: usize, total: usize },

    #[error("mask count {masks} does not match head count {heads}")]
    MaskCountMismatch { masks: usize, heads: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("unknown token id {0}")]
    UnknownToken(u32),

    #[error("zero denominator: reference output has zero norm")]
    ZeroDenominator,

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

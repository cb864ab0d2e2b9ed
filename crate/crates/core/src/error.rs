use thiserror::Error;

pub type Result<T> = std::result::Result<T, MixerError>;

#[derive(Debug, Error)]
pub enum MixerError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("degenerate embedding: norm {norm:e} is below {eps:e}")]
    DegenerateNorm { norm: f64, eps: f64 },

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("batch norm in training mode needs at least 2 rows, got {0}")]
    BatchTooSmall(usize),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("embedding row {row} is not unit norm (norm {norm})")]
    Unnormalized { row: usize, norm: f64 },

    #[error("label {label} out of range for {classes} categories")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("category {0} is not owned by any shard")]
    UnownedCategory(usize),

    #[error("invalid shard layout: {0}")]
    InvalidShardLayout(String),

    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },

    #[error("invalid token list: {0}")]
    InvalidTokens(String),

    #[error("dangling reference to sample {0}")]
    DanglingReference(u64),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),

    #[error("unresolved dataset selector `{0}`")]
    UnresolvedDataset(String),

    #[error("query {0} has no judgment")]
    MissingJudgment(u64),

    #[error("empty index")]
    EmptyIndex,

    #[error("malformed file {path}: {message}")]
    Format { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl MixerError {
    pub fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        MixerError::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// True for errors that stem from the filesystem rather than from data or configuration.
    pub fn is_io(&self) -> bool {
        matches!(self, MixerError::Io(_))
    }
}

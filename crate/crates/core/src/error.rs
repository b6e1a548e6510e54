use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("query is empty")]
    EmptyQuery,
    #[error("response is empty")]
    EmptyResponse,
    #[error("embedding provider failure: {0}")]
    ProviderFailure(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("zero vector cannot be normalized or compared")]
    ZeroVector,
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch too small: need at least {need}, got {got}")]
    BatchTooSmall { need: usize, got: usize },
    #[error("no training pairs supplied")]
    InsufficientData,
    #[error("too few samples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("k={k} exceeds input dimension {dim}")]
    KTooLarge { k: usize, dim: usize },
    #[error("degenerate data: covariance is all-zero")]
    DegenerateData,
    #[error("input is empty")]
    EmptyInput,
    #[error("need at least one duplicate and one non-duplicate label")]
    InsufficientLabels,
    #[error("unknown cache entry id {0}")]
    UnknownEntry(u64),
    #[error("entry {0} was not returned by a recorded lookup")]
    NoRecentLookup(u64),
    #[error("no client updates to aggregate")]
    EmptyUpdates,
    #[error("client update weight vectors have different lengths")]
    LengthMismatch,
    #[error("base query list is empty")]
    EmptyBase,
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt cache file: {0}")]
    CorruptFile(String),
    #[error("unsupported file version {0}")]
    VersionUnsupported(u16),
    #[error("upstream unreachable: {0}")]
    UpstreamUnreachable(String),
    #[error("upstream returned status {0}")]
    UpstreamBadStatus(u16),
    #[error("configuration error: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

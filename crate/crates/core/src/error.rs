use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        op: &'static str,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("invalid geometry for {op}: {reason}")]
    InvalidGeometry { op: &'static str, reason: String },

    #[error("batchnorm variance plus eps must be positive (channel {channel}: {value})")]
    NonPositiveVariance { channel: usize, value: f32 },

    #[error("loss must be a single-element tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("graph has already been differentiated; run a new forward pass")]
    StaleGraph,

    #[error("variable {0} does not belong to this graph")]
    UnknownVar(usize),

    #[error("layer {layer} ({name}): {reason}")]
    Layer {
        layer: usize,
        name: String,
        reason: String,
    },

    #[error("missing weight tensor `{0}`")]
    MissingWeight(String),

    #[error("invalid network spec: {0}")]
    InvalidSpec(String),

    #[error("archive: bad magic bytes")]
    BadMagic,

    #[error("archive: unsupported version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("archive: truncated ({0})")]
    Truncated(String),

    #[error("non-finite activation at boundary {boundary}")]
    NonFinite { boundary: usize },

    #[error("no attack records to analyse")]
    EmptyRecords,

    #[error("success record `{0}` has no disposition")]
    MissingDisposition(String),

    #[error("bound grid must be sorted ascending")]
    UnsortedGrid,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image encoding: {0}")]
    Image(String),
}

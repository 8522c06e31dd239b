use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("bad magic bytes, not an MVOL file")]
    BadMagic,
    #[error("truncated file: expected {expected} payload bytes, found {found}")]
    TruncatedFile { expected: usize, found: usize },
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("I/O failure on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("label code {code} out of range for {channels} channels")]
    CodeOutOfRange { code: u8, channels: usize },
    #[error("volume is not a probability volume")]
    NotProbabilities,
    #[error("label code {0} is not part of the schema")]
    UnknownCode(u8),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("spatial dims {dims:?} not divisible by {divisor}")]
    IndivisibleDims { dims: [usize; 3], divisor: usize },
    #[error("max pooling needs even spatial dims, got {0:?}")]
    OddSpatialDims([usize; 3]),
    #[error("backward requested without a recorded forward pass")]
    NoRecordedForward,
    #[error("degenerate intensities: 10th and 90th percentile coincide ({0})")]
    DegenerateIntensities(f64),
    #[error("too few cases: need at least {needed}, got {got}")]
    TooFewCases { needed: usize, got: usize },
    #[error("zero variance in volume list, correlation undefined")]
    ZeroVariance,
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("empty sampling pool: {0}")]
    EmptyPool(String),
    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("missing case {0}")]
    MissingCase(String),
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("anchor out of range: center={center}, duration={duration}")]
    InvalidAnchor { center: f64, duration: f64 },
    #[error("invalid span: start={start}, end={end}")]
    InvalidSpan { start: f64, end: f64 },
    #[error("sample has no annotated events")]
    NoGroundTruth,
    #[error("cost matrix has {rows} predictions for {cols} ground truths; need rows >= cols")]
    TooFewPredictions { rows: usize, cols: usize },
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFiniteCost { row: usize, col: usize },
    #[error("length mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },
    #[error("sample `{id}` has {events} events but the localizer has only {queries} queries")]
    TooManyEvents {
        id: String,
        events: usize,
        queries: usize,
    },
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("caption contains reserved token id {0}")]
    ReservedToken(usize),
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    #[error("span [{start}, {end}] covers no frame out of {frames}")]
    EmptySpan { start: f64, end: f64, frames: usize },
    #[error("feature width {got} does not match expected {expected}")]
    FeatureDim { expected: usize, got: usize },
    #[error("cannot pack {events} events into {frames} frames after {attempts} attempts")]
    InfeasiblePacking {
        events: usize,
        frames: usize,
        attempts: usize,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{kind} schema version {found} is not supported (expected {expected})")]
    SchemaVersion {
        kind: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("missing checkpoint entry `{0}`")]
    MissingCheckpoint(String),
    #[error(transparent)]
    Tensor(#[from] ndiff::NdiffError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the `tap` binary: 3 for a missing file, 4 for a
    /// file whose schema or checkpoint version is not supported, 1 otherwise.
    /// Command-line usage errors exit with 2 before any `Error` exists.
    pub fn exit_code(&self) -> i32 {
        use ndiff::NdiffError;
        match self {
            Error::Io(e) | Error::Tensor(NdiffError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => 3,
            Error::SchemaVersion { .. } | Error::Tensor(NdiffError::CheckpointVersion { .. }) => 4,
            _ => 1,
        }
    }
}

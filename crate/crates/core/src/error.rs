use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    // Audio decoding.
    #[error("malformed WAV header: {0}")]
    MalformedHeader(String),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),

    // Spectrogram front end.
    #[error("waveform has {samples} samples, fewer than one window of {window}")]
    TooShort { samples: usize, window: usize },
    #[error("waveform sample rate {waveform} Hz does not match config rate {config} Hz")]
    RateMismatch { waveform: u32, config: u32 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    // Clip sampling.
    #[error("video duration {duration_s}s is shorter than clip length {clip_length_s}s")]
    VideoTooShort { duration_s: f64, clip_length_s: f64 },
    #[error("transcript has no segments")]
    EmptyTranscript,
    #[error("invalid span [{start_s}, {end_s}]")]
    InvalidSpan { start_s: f64, end_s: f64 },
    #[error("manifest has {available} eligible videos, batch needs {required}")]
    InsufficientVideos { available: usize, required: usize },
    #[error("video {video_id} is missing the {modality} feature stream")]
    MissingModality { video_id: String, modality: String },

    // Model.
    #[error("empty sequence")]
    EmptySequence,
    #[error("caption has no words")]
    EmptyCaption,
    #[error("modality mismatch: {0}")]
    ModalityMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    // Losses and retrieval.
    #[error("embedding counts differ: {left} vs {right}")]
    CountMismatch { left: usize, right: usize },
    #[error("embedding dimensions differ: {left} vs {right}")]
    DimMismatch { left: usize, right: usize },
    #[error("MIL-NCE loss requires a neighbor map")]
    MissingNeighborMap,
    #[error("query {0} has no valid ground-truth gallery index")]
    MissingTruth(usize),

    // Training.
    #[error("loss is not finite: {0}")]
    NonFiniteLoss(f64),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    DivergedLoss { epoch: usize, loss: f64 },

    // Concept discovery.
    #[error("requested top-{k} from a set of {available}")]
    KTooLarge { k: usize, available: usize },
    #[error("no labels available for {0} inputs")]
    EmptyLabelSpace(String),

    // Binary file formats.
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("file truncated: {0}")]
    TruncatedFile(String),
    #[error("invalid file contents: {0}")]
    InvalidFile(String),

    #[error("config error: {0}")]
    Config(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
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

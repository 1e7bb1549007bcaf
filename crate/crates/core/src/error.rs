use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("length mismatch: expected {expected} samples, got {got}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("sample rate mismatch: {0} Hz vs {1} Hz")]
    SampleRateMismatch(u32, u32),

    #[error("{0} has zero power; gain is undefined")]
    ZeroPower(&'static str),

    #[error("waveform must contain at least one finite sample")]
    EmptyWaveform,

    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),

    #[error("input too short: {got} samples, need at least {need}")]
    InputTooShort { got: usize, need: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown layer-weight scheme {0:?} (expected last, all or latter_half)")]
    UnknownScheme(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("malformed WAV file {path}: {detail}")]
    MalformedWav { path: PathBuf, detail: String },

    #[error("unsupported channels: {path} has {channels} channels, expected mono")]
    UnsupportedChannels { path: PathBuf, channels: u16 },

    #[error("unsupported bit depth: {path} has {bits} bits per sample, expected 16")]
    UnsupportedBitDepth { path: PathBuf, bits: u16 },

    #[error("checkpoint error in {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("checkpoint version mismatch in {path}: magic/version {found} not supported")]
    CheckpointVersion { path: PathBuf, found: String },

    #[error("corpus error: {0}")]
    Corpus(String),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("labels misaligned: {labels} labels for {frames} feature frames")]
    MisalignedLabels { labels: usize, frames: usize },

    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("non-finite {0}")]
    NonFinite(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

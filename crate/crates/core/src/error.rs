use std::path::PathBuf;

use thiserror::Error;

use crate::domain::ComponentKind;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("channel mismatch: expected 3 channels, found {0}")]
    ChannelMismatch(usize),

    #[error("invalid image dimensions {height}x{width}")]
    EmptyImage { height: usize, width: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("input too small: {height}x{width} is below the largest backbone stride {stride}")]
    InputTooSmall {
        height: usize,
        width: usize,
        stride: usize,
    },

    #[error("pyramid inconsistent: {0}")]
    PyramidInconsistent(String),

    #[error("fusion arity error: {0}")]
    FusionArity(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("empty variant: at least one component kind is required")]
    EmptyVariant,

    #[error("duplicate component kind {0}")]
    DuplicateKind(ComponentKind),

    #[error("unknown component kind `{0}`")]
    UnknownKind(String),

    #[error("image {height}x{width} is smaller than the {window}x{window} window")]
    SmallerThanWindow {
        height: usize,
        width: usize,
        window: usize,
    },

    #[error("no pairs found under {0}")]
    NoPairs(PathBuf),

    #[error("zero samples in {0}")]
    ZeroSamples(String),

    #[error("invalid haze parameters: {0}")]
    HazeParams(String),

    #[error("transmission {value} is below the floor {floor}")]
    TransmissionFloor { value: f64, floor: f64 },

    #[error("iteration {iter} outside [0, {max_iters}]")]
    IterOutOfRange { iter: usize, max_iters: usize },

    #[error("non-finite loss at iteration {iter}; offending batch dumped to {dump}")]
    NonFiniteLoss { iter: usize, dump: String },

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("checkpoint parse error: {0}")]
    CheckpointParse(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("cannot write output {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn output(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Output {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("diffusion step {t} out of range 1..={steps}")]
    StepOutOfRange { t: usize, steps: usize },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("solver became unstable at t = {time:.6}: {bound}")]
    Unstable { time: f64, bound: String },

    #[error("incompatible inputs: {0}")]
    Incompatible(String),

    #[error("checksum mismatch for {path}: manifest says {expected:08x}, payload has {actual:08x}")]
    Checksum {
        path: PathBuf,
        expected: u32,
        actual: u32,
    },

    #[error("unsupported format version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("truncated payload {path}: expected {expected} bytes, found {actual}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("malformed manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },

    #[error("too many failed samples: {failed} of {requested}")]
    GenerationFailed { failed: usize, requested: usize },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("model evaluation failed: {0}")]
    Model(String),

    #[error("image encoding failed: {0}")]
    Image(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }
}

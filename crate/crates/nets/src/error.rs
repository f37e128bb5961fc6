pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] compdiff_core::Error),

    #[error("tensor backend: {0}")]
    Backend(#[from] candle_core::Error),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint and data are incompatible: {0}")]
    Incompatible(String),

    #[error("training diverged: {0}")]
    Diverged(String),
}

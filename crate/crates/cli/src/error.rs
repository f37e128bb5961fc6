pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Incompatible(String),

    #[error(transparent)]
    Core(#[from] compdiff_core::Error),

    #[error(transparent)]
    Nets(#[from] compdiff_nets::Error),
}

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_INCOMPATIBLE: i32 = 3;
pub const EXIT_NUMERICAL: i32 = 4;

fn core_code(e: &compdiff_core::Error) -> i32 {
    use compdiff_core::Error as E;
    match e {
        E::InvalidParameter(_) | E::StepOutOfRange { .. } => EXIT_USAGE,
        E::Io(_) | E::Checksum { .. } | E::Version { .. } | E::Truncated { .. } | E::Manifest { .. } | E::Image(_) => {
            EXIT_IO
        }
        E::Incompatible(_) | E::ShapeMismatch { .. } | E::Empty(_) => EXIT_INCOMPATIBLE,
        E::NonFinite(_) | E::Unstable { .. } | E::GenerationFailed { .. } | E::Model(_) => EXIT_NUMERICAL,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use compdiff_nets::Error as N;
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Incompatible(_) => EXIT_INCOMPATIBLE,
            CliError::Core(e) => core_code(e),
            CliError::Nets(N::Core(e)) => core_code(e),
            CliError::Nets(N::Config(_)) => EXIT_USAGE,
            CliError::Nets(N::Incompatible(_)) => EXIT_INCOMPATIBLE,
            CliError::Nets(N::Backend(_) | N::Diverged(_)) => EXIT_NUMERICAL,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

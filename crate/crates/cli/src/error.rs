use std::path::{Path, PathBuf};

/// Process exit codes.
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error in {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error(transparent)]
    Core(#[from] hazeforge::Error),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        use hazeforge::Error as E;
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Io { .. } | CliError::Image { .. } => EXIT_IO,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Core(e) => match e {
                E::Config(_) | E::InvalidInput(_) | E::Shape { .. } => EXIT_CONFIG,
                E::Io { .. } | E::Json { .. } | E::Format { .. } | E::Integrity { .. } | E::Version { .. } => EXIT_IO,
                E::NonFinite { .. } => EXIT_NUMERIC,
                _ => 1,
            },
        }
    }
}

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{format} line {line}: {msg}")]
    Parse {
        format: &'static str,
        line: usize,
        msg: String,
    },
    #[error("unsupported {format} version {found} (this build reads version {expected})")]
    Version {
        format: &'static str,
        found: u32,
        expected: u32,
    },
    #[error("not a parameter file (bad magic)")]
    ParamMagic,
    #[error("parameter file truncated in {0}")]
    Truncated(String),
    #[error("parameter file checksum mismatch (stored {stored:08x}, computed {computed:08x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("parameters do not fit the network: {0}")]
    ParamMismatch(String),
    #[error("accuracy budget cannot be met: {0}")]
    Unmeetable(String),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] fxpnet_core::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Process exit codes of the command-line tool.
pub mod exit {
    pub const OK: i32 = 0;
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const IO: i32 = 3;
    pub const INVALID: i32 = 4;
    pub const UNMEETABLE: i32 = 5;
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } => exit::IO,
            Error::Csv(e) if e.is_io_error() => exit::IO,
            Error::Unmeetable(_) => exit::UNMEETABLE,
            Error::Usage(_) => exit::USAGE,
            Error::Core(fxpnet_core::Error::Diverged { .. }) => exit::FAILURE,
            _ => exit::INVALID,
        }
    }
}

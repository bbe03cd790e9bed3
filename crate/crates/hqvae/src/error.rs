use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {detail}")]
    Config { detail: String },

    #[error("data error at {path}: {detail}")]
    Data { path: PathBuf, detail: String },

    #[error("numeric abort at step {step}: {term} is not finite")]
    Numeric { step: u64, term: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] hqvae_tensor::Error),
}

impl Error {
    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config { detail: detail.into() }
    }

    pub fn data(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Data { path: path.into(), detail: detail.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for the CLI: 2 config, 3 numeric, 4 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } => 2,
            Error::Numeric { .. } => 3,
            Error::Data { .. } | Error::Io { .. } => 4,
            Error::Tensor(e) => match e {
                hqvae_tensor::Error::Io(_) => 4,
                hqvae_tensor::Error::NonFinite { .. } => 3,
                hqvae_tensor::Error::Archive { .. }
                | hqvae_tensor::Error::ArchiveVersion { .. }
                | hqvae_tensor::Error::MissingEntry { .. } => 4,
                _ => 2,
            },
        }
    }
}

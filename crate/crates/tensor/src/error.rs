pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: expected a scalar value, got shape {dims:?}")]
    ScalarExpected { op: &'static str, dims: Vec<usize> },

    #[error("graph: {detail}")]
    Graph { detail: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("archive: {detail}")]
    Archive { detail: String },

    #[error("archive version {found} not supported (this build reads {supported})")]
    ArchiveVersion { found: u32, supported: u32 },

    #[error("archive entry not found: {name}")]
    MissingEntry { name: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub fn graph(detail: impl Into<String>) -> Self {
        Error::Graph { detail: detail.into() }
    }
}

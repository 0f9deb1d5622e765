use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds max_seq {max}")]
    Length { len: usize, max: usize },

    #[error("caption generation failed: {0}")]
    Generation(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("misaligned inputs: {left} vs {right}")]
    Alignment { left: usize, right: usize },

    #[error("target position {target} out of range for sequence of length {len}")]
    Target { target: usize, len: usize },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("example {index}: {source}")]
    AtExample {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable class used by the CLI on stderr.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Length { .. } => "length",
            Error::Generation(_) => "generation",
            Error::Numeric(_) => "numeric",
            Error::Alignment { .. } => "alignment",
            Error::Target { .. } => "target",
            Error::Format(_) => "format",
            Error::AtExample { source, .. } => source.class(),
            Error::Io(_) => "io",
        }
    }

    pub(crate) fn at(index: usize, source: Error) -> Error {
        Error::AtExample {
            index,
            source: Box::new(source),
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

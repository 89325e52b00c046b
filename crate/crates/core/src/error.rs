use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("field `{field}`: {message}")]
    Invalid { field: &'static str, message: String },

    #[error("missing field `{0}`")]
    MissingField(&'static str),

    #[error("{0}")]
    Precondition(String),

    #[error("no graph embedding for system(s): {}", .0.join(", "))]
    MissingEmbeddings(Vec<String>),

    #[error("record(s) without energy label: {}", .0.join(", "))]
    MissingLabels(Vec<String>),

    #[error("token id {0} out of range for a vocabulary of {1}")]
    TokenOutOfRange(usize, usize),

    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error(transparent)]
    Numerics(#[from] numerics::NumericsError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, message: impl Into<String>) -> Self {
        Self::Invalid {
            field,
            message: message.into(),
        }
    }

    /// Attach a line number to an error raised while reading a line-oriented file.
    pub(crate) fn at_line(self, line: usize) -> Self {
        match self {
            Self::Parse { .. } => self,
            other => Self::Parse {
                line,
                message: other.to_string(),
            },
        }
    }
}

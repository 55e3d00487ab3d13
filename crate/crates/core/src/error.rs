use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("line {line}: {kind}")]
    Parse { line: usize, kind: ParseErrorKind },

    #[error("alignment: {0}")]
    Alignment(String),

    #[error("config: {0}")]
    Config(String),

    #[error("shape mismatch for `{name}`: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("unknown tensor `{0}`")]
    UnknownTensor(String),

    #[error("missing tensor `{0}`")]
    MissingTensor(String),

    #[error("archive: {0}")]
    Archive(String),

    #[error("input: {0}")]
    Input(String),

    #[error("non-finite value in `{0}`")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// What went wrong on a given line of a text input.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ParseErrorKind {
    #[error("malformed header: {0}")]
    Header(String),
    #[error("expected {expected} values, found {found}")]
    RowLength { expected: usize, found: usize },
    #[error("row sum {0} outside tolerance")]
    RowSum(f64),
    #[error("not a number: `{0}`")]
    NotNumeric(String),
    #[error("value {0} outside [0, 1]")]
    OutOfRange(f64),
    #[error("expected {expected} rows, found {found}")]
    RowCount { expected: usize, found: usize },
    #[error("unknown phone symbol `{0}`")]
    UnknownPhone(String),
    #[error("{0}")]
    Other(String),
}

impl Error {
    pub(crate) fn parse(line: usize, kind: ParseErrorKind) -> Self {
        Error::Parse { line, kind }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short category used for machine-readable error prefixes.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Parse { .. } | Error::Alignment(_) => "parse",
            Error::Config(_) => "config",
            Error::ShapeMismatch { .. }
            | Error::UnknownTensor(_)
            | Error::MissingTensor(_)
            | Error::Archive(_) => "model",
            Error::Input(_) => "input",
            Error::NonFinite(_) => "numeric",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

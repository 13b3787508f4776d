use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("timestep {t} outside [{lo}, {hi}]")]
    Range { t: usize, lo: usize, hi: usize },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("unknown token `{0}`")]
    Vocabulary(String),
    #[error("lookup error: {0}")]
    Lookup(String),
    #[error("sample {index}: {msg}")]
    Parse { index: usize, msg: String },
    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite {what} at step {step}")]
    Numerical { step: usize, what: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

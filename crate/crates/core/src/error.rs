use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants map onto the CLI exit codes: `Config` is a usage problem,
/// `Input`/`Io`/`Json`/`Wav` are input problems and `Divergence` is a
/// numerical failure during training.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }
}

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {shapes:?}")]
    Shape {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },
    #[error("{op}: non-finite result")]
    NonFinite { op: &'static str },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("model build error: {0}")]
    Build(String),
    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },
    #[error("label recovery failed: {0}")]
    LabelRecovery(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("attack failed: {0}")]
    Attack(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("format error in {file}: {detail}")]
    Format { file: String, detail: String },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn format(file: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Format {
            file: file.into(),
            detail: detail.into(),
        }
    }
}

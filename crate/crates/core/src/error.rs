use std::path::PathBuf;

/// Errors raised anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("step t={t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("{0}")]
    Invalid(String),

    #[error("non-finite loss at step {step} (t={t:?}): l_ddpm={l_ddpm} l_scl={l_scl} total={total}")]
    NonFiniteLoss {
        step: usize,
        t: Vec<usize>,
        l_ddpm: f64,
        l_scl: f64,
        total: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: malformed file at byte {offset}: {detail}")]
    Format {
        path: PathBuf,
        offset: u64,
        detail: String,
    },

    #[error("{path}:{line}: {detail}")]
    Parse {
        path: PathBuf,
        line: usize,
        detail: String,
    },

    #[error("image encoding: {0}")]
    Image(#[from] image::ImageError),

    #[error("fusion consistency failure: {0}")]
    Fusion(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

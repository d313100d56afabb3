use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("input too short: {0}")]
    InputTooShort(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("signal-to-noise ratio is undefined for a silent clean signal")]
    UndefinedSnr,

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("non-finite value produced by `{op}`")]
    NonFinite { op: &'static str },

    #[error("gradient check failed for {0:?}")]
    Verification(Vec<String>),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Shape { .. }
            | Error::InputTooShort(_)
            | Error::Input(_)
            | Error::UndefinedSnr
            | Error::Format { .. }
            | Error::Io(_)
            | Error::Json(_)
            | Error::Wav(_)
            | Error::Image(_) => 2,
            Error::Config(_) | Error::Contract(_) => 3,
            Error::Mode(_) => 4,
            Error::Verification(_) => 5,
            Error::NonFinite { .. } => 1,
        }
    }
}

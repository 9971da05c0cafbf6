use std::path::PathBuf;

/// Errors surfaced by the editing pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A non-finite value appeared; `step` is the denoising or inversion step index when known.
    #[error("numerical failure{}: {message}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    NumericalFailure { step: Option<usize>, message: String },

    #[error("object mask covers {coverage:.4} of the image, below the minimum {min_area:.4}; supply an object prompt or a manual mask")]
    EmptyMask { coverage: f64, min_area: f64 },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("record is not usable: reconstruction PSNR {psnr:.2} dB below floor {floor:.2} dB")]
    UnusableRecord { psnr: f64, floor: f64 },

    #[error("malformed file {path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("cancelled at step {0}")]
    Cancelled(usize),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn numerical(step: Option<usize>, msg: impl Into<String>) -> Self {
        Error::NumericalFailure {
            step,
            message: msg.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: msg.into(),
        }
    }

    /// Attaches a step index to numerical failures that lack one.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::NumericalFailure { step: None, message } => Error::NumericalFailure {
                step: Some(step),
                message,
            },
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("missing `intrinsics` header (must be the first non-comment line)")]
    MissingIntrinsics,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("point is behind the camera (z = {0})")]
    BehindCamera(f64),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("insufficient support: {what} (have {have}, need {need})")]
    InsufficientSupport {
        what: &'static str,
        have: usize,
        need: usize,
    },

    #[error("factorization did not converge after {iters} iterations (last relative change {last_change:e})")]
    NonConvergence {
        iters: usize,
        last_change: f64,
        /// Last iterate `(C, D)`.
        last: Box<(Vec<f64>, Vec<f64>)>,
    },

    #[error("pose graph is disconnected: components {0:?}")]
    Disconnected(Vec<Vec<usize>>),

    #[error("no rotation source: provide `rot` records in the track file, or `gt` records together with a rotation noise level")]
    NoRotationSource,

    #[error("tracking lost at frame {0}")]
    TrackingLost(usize),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }

    /// True for failures of the numerics rather than of the input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Degenerate(_)
                | Error::InsufficientSupport { .. }
                | Error::NonConvergence { .. }
                | Error::Disconnected(_)
                | Error::TrackingLost(_)
                | Error::BehindCamera(_)
        )
    }
}

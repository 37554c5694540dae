use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error(
        "{n_points} sample points cannot represent modes up to |k| = {k_max} without aliasing"
    )]
    Aliasing { n_points: usize, k_max: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("blow-up detected at step {step} (t = {time})")]
    BlowUp { step: u64, time: f64 },

    #[error("requested range {requested:?} lies outside the available data {available:?}")]
    Range {
        requested: (f64, f64),
        available: (f64, f64),
    },

    #[error("singular fit: {0}")]
    SingularFit(String),

    #[error("sign inconsistency: {0}")]
    SignInconsistency(String),

    #[error("missing coefficients: {0}")]
    MissingCoefficients(String),

    #[error("symbolic expansion error: {0}")]
    Symbolic(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid data: {0}")]
    Data(String),

    #[error("stratum {stratum} has {count} sampled PSU(s); the Rao-Wu bootstrap needs at least 2")]
    SinglePsuStratum { stratum: String, count: usize },

    #[error("cannot draw {requested} items from a pool of {available}")]
    SampleSize { requested: usize, available: usize },

    #[error("kernel range must be positive, got {0}")]
    NonPositiveRange(f64),

    #[error("all kernel inputs are identical; the range parameter is zero")]
    DegenerateInputs,

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("calibration did not converge: {0}")]
    Calibration(String),

    #[error("estimator precondition failed: {0}")]
    Estimator(String),

    #[error("Rubin combination needs a complete {b}x{l} grid, found {found} records")]
    IncompleteGrid { b: usize, l: usize, found: usize },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("CSV error in {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Errors a caller can fix by editing the configuration, as opposed to
    /// problems with the input data or the computation itself.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}

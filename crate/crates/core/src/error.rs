use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("time {t} s outside [0, {duration}] s")]
    TimeOutOfRange { t: f64, duration: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("fit failed: {0}")]
    FitFailed(String),

    #[error("sampling grid mismatch: {0}")]
    GridMismatch(String),

    #[error("eta {eta} is at or below the fit-noise baseline {baseline}: below sensitivity")]
    BelowSensitivity { eta: f64, baseline: f64 },

    #[error("eta {eta} outside calibrated range [{min}, {max}]: extrapolation refused")]
    Extrapolation { eta: f64, min: f64, max: f64 },

    #[error("fingerprint mismatch: calibration {calibration}, data {data}")]
    FingerprintMismatch { calibration: String, data: String },

    #[error("{file}:{line}: {message}")]
    Parse {
        file: String,
        line: usize,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Euler–Maruyama produced a non-finite state.
    #[error("integration blew up at t = {t}: non-finite state {state:?}")]
    IntegrationBlowup { t: f64, state: Vec<f64> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("receding horizon {horizon} s cannot cover t_end = {t_end} s")]
    HorizonExceeded { horizon: f64, t_end: f64 },

    #[error("barrier derivative check failed: {0}")]
    BarrierCheck(String),

    /// The explicit scheme was forced with a step above the stability bound.
    #[error("explicit step dT = {dt} violates the CFL bound; require dT <= {bound}")]
    Cfl { dt: f64, bound: f64 },

    #[error("scheme failure: value {value} at node {node} (T = {horizon}) left [0, 1]")]
    SchemeFailure { node: usize, horizon: f64, value: f64 },

    #[error("field format: {0}")]
    Format(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::IntegrationBlowup { .. } | Error::Cfl { .. } | Error::SchemeFailure { .. })
    }
}

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("coordinate {value} on axis {axis} is outside the domain [{lo}, {hi}]")]
    Domain {
        axis: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },

    /// Replay buffer holds fewer transitions than requested.
    #[error("not ready: {0}")]
    NotReady(String),

    #[error("numerical fault: {0}")]
    Fault(String),

    #[error("version mismatch: file has version {found}, this build supports version {supported}")]
    Version { found: u32, supported: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            msg: msg.into(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for errors caused by user input rather than a runtime fault.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::Domain { .. } | Error::Config { .. } | Error::Version { .. }
        )
    }
}

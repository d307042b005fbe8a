use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("step index {t} out of range 0..={max}")]
    Index { t: usize, max: usize },

    #[error("condition error: {0}")]
    Condition(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("numeric failure at step t={step}: {message}")]
    Numeric { step: usize, message: String },

    #[error("run failed: {0}")]
    Runtime(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: String, message: String },
}

impl Error {
    /// True for failures that come from the numerics rather than from bad input.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric { .. })
    }

    /// True for failures during a run, as opposed to bad configuration or input.
    pub fn is_runtime(&self) -> bool {
        matches!(self, Error::Numeric { .. } | Error::Runtime(_))
    }
}

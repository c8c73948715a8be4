use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    Parameter { name: String, reason: String },
    #[error("shell ({lo}, {hi}] contains no modes at this resolution")]
    EmptyShell { lo: f64, hi: f64 },
    #[error("gauge error: {0}")]
    Gauge(String),
    #[error("synthesis error: {0}")]
    Synthesis(String),
    #[error("integration error: {0}")]
    Integration(String),
    #[error("resource limit: {0}")]
    Resource(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn param(name: &str, reason: impl Into<String>) -> Error {
    Error::Parameter {
        name: name.to_string(),
        reason: reason.into(),
    }
}

pub(crate) fn ensure(cond: bool, name: &str, reason: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(param(name, reason))
    }
}

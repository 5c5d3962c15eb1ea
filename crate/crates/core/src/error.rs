use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// An action or state outside the environment's declared domain.
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation called in a state that does not permit it.
    #[error("usage error: {0}")]
    Usage(String),

    /// The proposal assigns zero (or negative) density to an action it produced
    /// or was asked to weigh, so the importance weight is undefined.
    #[error("degenerate sampler: density {density} for {context}")]
    DegenerateSampler { density: f64, context: String },

    #[error("unreachable successor: {0}")]
    Unreachable(String),

    #[error("oracle unsolvable: {0}")]
    OracleUnsolvable(String),

    #[error("undefined conditional: {0}")]
    UndefinedConditional(String),

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("kernel matrix ill-conditioned after jitter {jitter:e}")]
    IllConditioned { jitter: f64 },

    #[error("numerical instability: {0}")]
    Numerical(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("i/o error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

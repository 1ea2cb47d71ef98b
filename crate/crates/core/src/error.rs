//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied value violated a documented precondition.
    #[error("invalid input: {0}")]
    Validation(String),

    /// Value iteration failed to contract below tolerance within the sweep
    /// budget.
    #[error("value iteration diverged: residual {residual:.3e} after {sweeps} sweeps")]
    SolverDiverged { residual: f64, sweeps: usize },

    /// The subsidy bisection could not bracket a sign change even after
    /// expanding the search interval.
    #[error(
        "no subsidy bracket for state {state}: passive-margin sign is constant on [{lo}, {hi}]"
    )]
    UnbracketedIndex { state: usize, lo: f64, hi: f64 },

    /// The passive set shrank somewhere along the subsidy grid, so the arm
    /// has no well-defined index ordering.
    #[error("arm is not indexable: passive set shrinks between subsidies {at} and {next}")]
    NotIndexable { at: f64, next: f64 },

    /// Experiment configuration failed validation.
    #[error("config error: {0}")]
    Config(String),

    /// A pipeline stage needs an artifact another stage has not produced.
    #[error("missing artifact {path}: run the `{stage}` stage first")]
    MissingArtifact { path: String, stage: String },

    /// Malformed row or header in a data file.
    #[error("format error in {path}: {message}")]
    Format { path: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("toml error: {0}")]
    TomlParse(#[from] toml::de::Error),
}

impl Error {
    pub fn validation(message: impl Into<String>) -> Self {
        Error::Validation(message.into())
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::Config(message.into())
    }

    pub fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

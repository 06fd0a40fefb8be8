use thiserror::Error;

/// Errors raised by the analysis pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("singular design: {0}")]
    SingularDesign(String),

    #[error("formula error: {0}")]
    Formula(String),

    #[error("unseen level `{level}` for factor `{factor}`")]
    UnseenLevel { factor: String, level: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("signal too short: {len} weeks, need at least {required}")]
    SignalTooShort { len: usize, required: usize },

    #[error("fit did not converge: {0}")]
    NotConverged(String),

    #[error("unknown {kind} `{name}`")]
    UnknownStrategy { kind: &'static str, name: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable, machine-readable class name used by the CLI.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Schema(_) => "schema",
            Error::InsufficientData(_) => "insufficient_data",
            Error::SingularDesign(_) => "singular_design",
            Error::Formula(_) => "formula",
            Error::UnseenLevel { .. } => "unseen_level",
            Error::Numerical(_) => "numerical",
            Error::Config(_) => "config",
            Error::SignalTooShort { .. } => "signal_too_short",
            Error::NotConverged(_) => "not_converged",
            Error::UnknownStrategy { .. } => "unknown_strategy",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

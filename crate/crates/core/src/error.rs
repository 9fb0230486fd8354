use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration at `{path}`: {detail}")]
    Config { path: String, detail: String },

    #[error("missing artifact {path}: {detail}")]
    MissingArtifact { path: String, detail: String },

    #[error("numerical failure in {context}: {detail}")]
    Numerical { context: String, detail: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("point {index} lies outside the domain")]
    OutsideDomain { index: usize },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error(transparent)]
    Grad(#[from] gradcore::GradError),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn numerical(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numerical { context: context.into(), detail: detail.into() }
    }

    pub fn config(path: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config { path: path.into(), detail: detail.into() }
    }
}

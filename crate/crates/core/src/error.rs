use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("positivity violated: {count} rows have observation probability below floor {floor} (min {min:.3e})")]
    Positivity { count: usize, floor: f64, min: f64 },

    #[error("degenerate missingness mechanism: {0}")]
    DegenerateMechanism(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("non-finite loss at epoch {epoch} (max weight {max_weight:.3e})")]
    NonFiniteLoss { epoch: usize, max_weight: f64 },

    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    #[error("insufficient rows: need {needed}, have {have}")]
    InsufficientRows { needed: usize, have: usize },

    #[error("infeasible marginals: {0}")]
    Infeasible(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// The innermost error, with any context layers stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            other => other,
        }
    }
}

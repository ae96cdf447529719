use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite function value at evaluation {index}")]
    Evaluation { index: usize },

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("class {class} has no samples on any client")]
    MissingClass { class: usize },

    #[error("degenerate prompt for class {class}: encoded prompt has zero norm")]
    DegeneratePrompt { class: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("parse error at {context}: {message}")]
    Parse { context: String, message: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("round {round}, {step}: {source}")]
    Round {
        round: usize,
        step: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn at(self, round: usize, step: &'static str) -> Self {
        Error::Round {
            round,
            step,
            source: Box::new(self),
        }
    }

    /// True when the innermost error is a training divergence.
    pub fn is_divergence(&self) -> bool {
        matches!(self.root(), Error::Divergence { .. })
    }

    /// The innermost error, skipping round/step context wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Round { source, .. } => source.root(),
            other => other,
        }
    }
}

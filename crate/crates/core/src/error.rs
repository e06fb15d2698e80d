use thiserror::Error;

/// Errors raised by graph construction, simulation and estimation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("node {node} has no neighbors; prune isolated nodes before applying a neighborhood exposure")]
    IsolatedNode { node: usize },

    #[error("positivity violation: {0}")]
    Positivity(String),

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("mode error: {0}")]
    Mode(String),

    #[error("non-finite value in {what} at row {row}")]
    Numeric { row: usize, what: &'static str },

    #[error("size limit exceeded: {0}")]
    Size(String),

    #[error("argument error: {0}")]
    Argument(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("oracle construction failed: {0}")]
    Construction(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn in_fold(self, fold: usize) -> Self {
        Error::Fold {
            fold,
            source: Box::new(self),
        }
    }
}

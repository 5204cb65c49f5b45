use thiserror::Error;

pub type Result<T> = std::result::Result<T, LasynError>;

#[derive(Debug, Error)]
pub enum LasynError {
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("graph error: {0}")]
    Graph(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LasynError {
    pub fn config(msg: impl Into<String>) -> Self {
        LasynError::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        LasynError::Data(msg.into())
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            LasynError::Config(_) => 2,
            LasynError::Data(_) | LasynError::Io(_) | LasynError::Checkpoint(_) => 3,
            LasynError::Numeric(_) => 4,
            LasynError::Dimension { .. } | LasynError::Graph(_) => 4,
        }
    }
}

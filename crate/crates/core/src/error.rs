use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("singular linear system: {0}")]
    Singular(String),

    #[error("internal consistency check failed: {0}")]
    Consistency(String),

    #[error("degenerate importance weights for person {person}, outer draw {draw}")]
    DegenerateWeights { person: usize, draw: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid study design: {0}")]
    Design(String),

    #[error("learning-rate selection failed: {0}")]
    Selection(String),

    #[error("rotation failed: {0}")]
    Rotation(String),
}

impl Error {
    /// True for failures that come from the numerics rather than the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NotPositiveDefinite(_)
                | Error::Singular(_)
                | Error::Consistency(_)
                | Error::DegenerateWeights { .. }
                | Error::Selection(_)
                | Error::Rotation(_)
        )
    }
}

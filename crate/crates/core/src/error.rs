use thiserror::Error;

pub type Result<T> = std::result::Result<T, KrilcError>;

#[derive(Debug, Error)]
pub enum KrilcError {
    #[error("hyper-parameter `{param}` = {value} violates {bound}")]
    ParameterDomain {
        param: &'static str,
        value: f64,
        bound: &'static str,
    },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("numerically singular system: {0}")]
    Singular(String),

    #[error("ill-conditioned least squares: rank {rank} < {cols} columns")]
    IllConditioned { rank: usize, cols: usize },

    #[error("optimization failed: no start produced a finite objective ({starts} starts)")]
    OptimizationFailed { starts: usize },

    #[error("index out of range: {0}")]
    Index(String),

    #[error("sequencing error: {0}")]
    Sequencing(String),

    #[error("plant recursion blew up at t = {time}")]
    Instability { time: usize },

    #[error("fit undefined: {0}")]
    UndefinedFit(&'static str),

    #[error("plant generation failed after {attempts} attempts; failing filter: {filter}")]
    GenerationFailed { filter: &'static str, attempts: usize },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl KrilcError {
    /// Errors that stem from user input rather than from a numerical failure.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            KrilcError::Config(_) | KrilcError::Parse { .. } | KrilcError::ParameterDomain { .. }
        )
    }
}

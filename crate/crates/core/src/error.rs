use thiserror::Error;

use crate::model::Violation;

pub type Result<T> = std::result::Result<T, HmmError>;

#[derive(Debug, Error)]
pub enum HmmError {
    #[error("model: invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model: {} parameter violation(s): {}", .0.len(), join_violations(.0))]
    InvalidParameters(Vec<Violation>),

    #[error("model: observation {index} is not finite ({value})")]
    NonFiniteObservation { index: usize, value: f64 },

    #[error("model: empty observation series")]
    EmptySeries,

    #[error("model: series length must be at least 1")]
    InvalidLength,

    #[error("tensor: length {len} is not {k}^{vars}")]
    TensorShape { len: usize, k: usize, vars: usize },

    #[error("tensor: {0}")]
    IncompatibleWindow(String),

    #[error("recursion: zero normalizing constant at t={t}, j={j} (window configuration {config})")]
    ZeroNormalizer { t: usize, j: usize, config: usize },

    #[error("recursion: zero posterior in denominator at t={t}, j={j} (window configuration {config})")]
    ZeroPosterior { t: usize, j: usize, config: usize },

    #[error("recursion: misaligned windows: {0}")]
    Misaligned(String),

    #[error("recursion: reference sequence has zero posterior at t={t}")]
    InadmissibleReference { t: usize },

    #[error("oracle: {0}")]
    Oracle(String),

    #[error("em: {0}")]
    Estimation(String),

    #[error("io: {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("io: line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("io: {0}")]
    Format(String),
}

fn join_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

use thiserror::Error;

/// Errors raised anywhere in the training and analysis stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} (size {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },

    #[error("empty loss in {0}: every position is masked")]
    EmptyLoss(&'static str),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("sequence length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("did not converge: {msg} (last losses: {})", tail(.trace))]
    Convergence { msg: String, trace: Vec<f64> },

    #[error("parse error: {0}")]
    Parse(String),

    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Collision(std::path::PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn tail(trace: &[f64]) -> String {
    let start = trace.len().saturating_sub(5);
    trace[start..]
        .iter()
        .map(|v| format!("{v:.4}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, Error>;

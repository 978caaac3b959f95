use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value at index {index}: {context}")]
    Numeric { index: usize, context: String },

    #[error("degenerate lens: {0}")]
    DegenerateLens(String),

    #[error("cover error: {0}")]
    Cover(String),

    #[error("graph is disconnected: node {node} cannot reach node {from}")]
    Connectivity { node: usize, from: usize },

    #[error("rank deficient: {0}")]
    Rank(String),

    #[error("chart {chart} has zero total weight")]
    DegenerateChart { chart: usize },

    #[error("expected points are stale: computed at epoch {computed}, now epoch {now}, refresh every {every}")]
    Staleness { computed: usize, now: usize, every: usize },

    #[error("training diverged in phase {phase}, epoch {epoch}, chart {chart}: {detail}")]
    Divergence {
        phase: usize,
        epoch: usize,
        chart: usize,
        detail: String,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

/// Returns the first non-finite entry as a numeric error.
pub(crate) fn ensure_finite(values: &[f64], context: &str) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::Numeric {
            index,
            context: context.to_string(),
        }),
        None => Ok(()),
    }
}

use thiserror::Error;

/// Error type shared by every layer of the library.
///
/// Variants are grouped by origin so callers (notably the CLI) can map them
/// to coarse categories: configuration/data problems vs. runtime failures.
#[derive(Debug, Error)]
pub enum Error {
    // ── numeric core ─────────────────────────────────────────────────
    #[error("{op}: dimension mismatch, left is {a_rows}x{a_cols}, right is {b_rows}x{b_cols}")]
    ShapeMismatch {
        op: &'static str,
        a_rows: usize,
        a_cols: usize,
        b_rows: usize,
        b_cols: usize,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: expected a scalar (1x1), got {rows}x{cols}")]
    NotScalar {
        op: &'static str,
        rows: usize,
        cols: usize,
    },
    #[error("graph is degenerate: need at least 2 companies, got {n}")]
    DegenerateGraph { n: usize },
    #[error("{0}")]
    Contract(String),

    // ── data layer ───────────────────────────────────────────────────
    #[error("schema error: {0}")]
    Schema(String),
    #[error("line {line}: {msg}")]
    MalformedRow { line: u64, msg: String },
    #[error("dataset is empty: {0}")]
    EmptyDataset(String),
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("insufficient history: {days} days with window {window}; need at least {} days", window + 1)]
    InsufficientHistory { days: usize, window: usize },

    // ── configuration ────────────────────────────────────────────────
    #[error("config error: {0}")]
    Config(String),

    // ── checkpoints ──────────────────────────────────────────────────
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    // ── training ─────────────────────────────────────────────────────
    #[error("non-finite gradient in parameter '{0}'")]
    NonFiniteGradient(String),
    #[error("training diverged (non-finite loss) at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// True when the error is the user's fault (bad config or bad data),
    /// as opposed to a runtime/training failure.
    pub fn is_config_or_data(&self) -> bool {
        matches!(
            self,
            Error::Schema(_)
                | Error::MalformedRow { .. }
                | Error::EmptyDataset(_)
                | Error::Alignment(_)
                | Error::Data(_)
                | Error::InsufficientHistory { .. }
                | Error::Config(_)
                | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

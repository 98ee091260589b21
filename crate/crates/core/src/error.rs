use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, used by front-ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("degenerate batch: batchnorm in train mode needs at least 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },

    #[error("empty context: at least one context event is required")]
    EmptyContext,

    #[error("invalid state: {0}")]
    State(String),

    #[error("training diverged: non-finite gradient in parameter `{param}`")]
    Diverged { param: String },

    #[error(
        "non-finite loss at iteration {iteration} (lr {lr:.3e}, {saturated} saturated probabilities)"
    )]
    NonFiniteLoss {
        iteration: usize,
        lr: f64,
        saturated: usize,
    },

    #[error("{what} out of range: {detail}")]
    Range { what: &'static str, detail: String },

    #[error("unsupported FCS feature: {0}")]
    Unsupported(String),

    #[error("corrupt FCS file: {0}")]
    Corrupt(String),

    #[error("parse error at row {row}, column {column}: {detail}")]
    Parse {
        row: usize,
        column: usize,
        detail: String,
    },

    #[error("validation failed: {0}")]
    Validation(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("panel mismatch: missing markers {missing:?}")]
    PanelMismatch { missing: Vec<String> },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Diverged { .. } | Error::NonFiniteLoss { .. } => ErrorKind::Numeric,
            Error::Config(_) | Error::Range { .. } => ErrorKind::Config,
            Error::Fold { source, .. } => source.kind(),
            Error::DegenerateBatch { .. } | Error::State(_) => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

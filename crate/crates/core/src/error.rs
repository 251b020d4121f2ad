use std::path::PathBuf;

/// Errors raised anywhere in the modeling pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("non-finite value in {context}")]
    Numeric { context: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("recurrent state error: {0}")]
    State(String),

    #[error("empty batch: no supervised nodes")]
    EmptyBatch,

    #[error("training diverged at epoch {epoch}, segment {segment}: {reason}")]
    Training {
        epoch: usize,
        segment: usize,
        reason: String,
    },

    #[error("rollout failed at frame {frame}: {reason}")]
    Rollout { frame: u32, reason: String },

    #[error("ego vehicle {ego} not present at frame {frame}")]
    EgoAbsent { ego: u32, frame: u32 },

    #[error("coverage error: {0}")]
    Coverage(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("unit error: {0}")]
    Unit(String),

    #[error("unsupported checkpoint version {found} (supported: {supported})")]
    Version { found: u32, supported: u32 },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(context: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
        }
    }
}

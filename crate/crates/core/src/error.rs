use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the distillation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("empty batch")]
    EmptyBatch,

    #[error("query produced no tokens: {0:?}")]
    EmptyQuery(String),

    #[error("no external feature for query id {0:?}")]
    MissingFeature(String),

    #[error("objective requires teacher document embeddings but no document cache was supplied ({0})")]
    MissingDocEmbeddings(String),

    #[error("corrupt cache file: {0}")]
    CorruptCache(String),

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("step {step} outside schedule range 0..={total}")]
    InvalidStep { step: u64, total: u64 },

    #[error("run diverged at update {step}: {reason}")]
    DivergedRun { step: u64, reason: String },

    #[error("subset of fraction {fraction} from {available} records is empty")]
    EmptySubset { fraction: f64, available: usize },

    #[error("language {lang:?}: need {needed} translations, pool has {available}")]
    InsufficientTranslations {
        lang: String,
        needed: usize,
        available: usize,
    },

    #[error("invalid benchmark configuration: {0}")]
    InvalidBenchConfig(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("missing teacher embedding for id {0:?}")]
    MissingEmbedding(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    /// Stable snake_case name of the variant, for structured error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::DegenerateInput(_) => "degenerate_input",
            Error::DimMismatch { .. } => "dim_mismatch",
            Error::InvalidTemperature(_) => "invalid_temperature",
            Error::EmptyBatch => "empty_batch",
            Error::EmptyQuery(_) => "empty_query",
            Error::MissingFeature(_) => "missing_feature",
            Error::MissingDocEmbeddings(_) => "missing_doc_embeddings",
            Error::CorruptCache(_) => "corrupt_cache",
            Error::DuplicateId(_) => "duplicate_id",
            Error::InvalidStep { .. } => "invalid_step",
            Error::DivergedRun { .. } => "diverged_run",
            Error::EmptySubset { .. } => "empty_subset",
            Error::InsufficientTranslations { .. } => "insufficient_translations",
            Error::InvalidBenchConfig(_) => "invalid_bench_config",
            Error::InvalidConfig(_) => "invalid_config",
            Error::MissingEmbedding(_) => "missing_embedding",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

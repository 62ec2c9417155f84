use thiserror::Error;

/// Errors raised by the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("vector norm {norm:e} is too small to normalize")]
    ZeroNorm { norm: f64 },

    #[error("index error: {0}")]
    Index(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("class {class_id} has a degenerate feature mean (norm {norm:e})")]
    DegenerateClass { class_id: u32, norm: f64 },

    #[error("no class token for class {0}")]
    MissingToken(u32),

    #[error("class {0} is already present in the bank")]
    DuplicateClass(u32),

    #[error("task {0} has no training records")]
    NoData(usize),

    #[error("the model has no classes")]
    NoClasses,

    #[error("no test records to evaluate")]
    EmptyEval,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn format(offset: u64, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }

    /// True for errors caused by bad input data rather than bad configuration.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Format { .. }
                | Error::Io(_)
                | Error::NoData(_)
                | Error::EmptyEval
                | Error::MissingToken(_)
                | Error::DegenerateClass { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

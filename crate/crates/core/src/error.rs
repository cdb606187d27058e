use thiserror::Error;

/// Errors raised by fitting, scoring and evaluation routines.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Input(String),

    #[error("insufficient data: {got} points provided, at least {need} required")]
    InsufficientData { got: usize, need: usize },

    #[error("degenerate data: {0}")]
    DegenerateData(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("no usable rows: {0}")]
    EmptyData(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("reporting error: {0}")]
    Reporting(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// An error raised inside one (method, seed, alpha) cell of an experiment.
    #[error("[method={method} seed={seed} alpha={alpha}] {source}")]
    Tagged {
        method: String,
        seed: u64,
        alpha: String,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Numerical(_) => ErrorClass::Numerical,
            Error::Tagged { source, .. } => source.class(),
            _ => ErrorClass::Data,
        }
    }

    pub(crate) fn dim_mismatch(expected: usize, got: usize) -> Self {
        Error::Input(format!("dimension mismatch: expected {expected}, got {got}"))
    }

    pub(crate) fn tagged(self, method: &str, seed: u64, alpha: Option<f64>) -> Self {
        Error::Tagged {
            method: method.to_string(),
            seed,
            alpha: alpha.map_or_else(|| "-".to_string(), |a| a.to_string()),
            source: Box::new(self),
        }
    }
}

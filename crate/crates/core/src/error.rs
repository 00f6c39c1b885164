use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid mode: {0}")]
    InvalidMode(String),

    #[error("kernel alignment undefined: {0}")]
    UndefinedAlignment(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("objective diverged at epoch {epoch} while updating {block}")]
    Divergence { epoch: usize, block: char },

    #[error("too many atoms: {0}")]
    Resource(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

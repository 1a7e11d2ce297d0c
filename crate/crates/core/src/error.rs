use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("netpbm error at byte {offset}: {message}")]
    Netpbm { offset: usize, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// Every state's emission density vanished at this observation index.
    #[error("emission densities underflow at observation {index}")]
    Underflow { index: usize },

    #[error("parameter file line {line}: {message}")]
    ParamFormat { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn netpbm(offset: usize, message: impl Into<String>) -> Self {
        Error::Netpbm {
            offset,
            message: message.into(),
        }
    }
}

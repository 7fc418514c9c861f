use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the library can report. Variants map one-to-one onto the
/// diagnostic classes the command line prints.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("label error: label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
    #[error("backward already ran on this graph; zero its gradients before running it again")]
    DoubleBackward,
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::Dimension(msg.into())
}

pub(crate) fn geom_err(msg: impl Into<String>) -> Error {
    Error::Geometry(msg.into())
}

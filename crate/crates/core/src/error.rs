use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("out of bounds: {0}")]
    Bounds(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("frame error: {0}")]
    Frame(String),
    #[error("state error: {0}")]
    State(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Shape(msg.into()))
}

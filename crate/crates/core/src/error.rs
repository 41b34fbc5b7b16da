use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("wav decode error: {0}")]
    Decode(String),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model error: {0}")]
    Model(String),
    #[error("training error: {0}")]
    Training(String),
    #[error("stratification error: {0}")]
    Stratification(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("label error: {0}")]
    Label(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

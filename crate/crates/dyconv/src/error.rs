use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Error taxonomy shared by every module. The variant names mirror where the
/// blame lies: `Shape` for disagreeing tensor geometry, `Config` for
/// ill-formed requests (bad groups, unknown fields, impossible modes),
/// `State` for using a component before it is ready, `Data` for dataset and
/// IO problems, `Format` for unparseable files, `Invariant` for violated
/// mathematical contracts detected at runtime, and `Divergence` for training
/// runs that produced a non-finite loss.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("state error: {0}")]
    State(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("training diverged at epoch {epoch}: {message}")]
    Divergence { epoch: usize, message: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Data(e.to_string())
    }
}

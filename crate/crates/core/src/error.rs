use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("range error: lo ({lo}) must be below hi ({hi})")]
    Range { lo: f64, hi: f64 },
    #[error("grid error: {0}")]
    Grid(String),
    #[error("structure error: {0}")]
    Structure(String),
    #[error("numerical error at iteration {iteration}: {detail}")]
    Numerical { iteration: usize, detail: String },
    #[error("contract error: {0}")]
    Contract(String),
    #[error("state error: {0}")]
    State(String),
    #[error("format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },
    #[error("training error at iteration {iteration}: {detail}")]
    Training { iteration: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }
}

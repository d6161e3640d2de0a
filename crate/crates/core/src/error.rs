use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("twin {twin} failed: {source}")]
    Twin {
        twin: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("layer {layer} would keep 0 of {size} weights at density {density}")]
    DegenerateLayer {
        layer: usize,
        size: usize,
        density: f64,
    },

    #[error("degenerate outputs: {0}")]
    DegenerateOutput(String),

    #[error("suspicious input: {0}")]
    SuspiciousInput(String),

    #[error("format error at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("checkpoint error in section `{section}`: {message}")]
    Checkpoint {
        section: &'static str,
        message: String,
    },

    #[error("no viable rho: every run in the grid diverged")]
    NoViableRho,

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}

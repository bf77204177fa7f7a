use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Bad input: dimensions, degrees, divisibility, config keys.
    #[error("{0}")]
    Validation(String),

    #[error("non-finite activation at diffusion step {step}, layer {layer}")]
    NonFinite { step: usize, layer: usize },

    #[error("{0}")]
    Numeric(String),

    /// A KV buffer read saw data older than one diffusion step.
    #[error(
        "stale KV read on layer {layer}, patch {patch}: source step {source_step} at step {step}"
    )]
    Staleness {
        layer: usize,
        patch: usize,
        step: usize,
        source_step: usize,
    },

    #[error("worker channel closed: {0}")]
    Channel(String),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    /// True for errors caused by the caller's input rather than by the computation.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Validation(_))
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err($crate::error::Error::Validation(format!($($arg)+)));
        }
    };
}

pub(crate) use ensure;

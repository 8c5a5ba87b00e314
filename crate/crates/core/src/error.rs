use crate::metrics::Signal;

/// Errors produced by the certaindex library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty answer set")]
    EmptyAnswerSet,

    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("reward {0} outside [0, 1]")]
    RewardOutOfRange(f64),

    #[error("threshold configured for absent signal `{0}`")]
    MissingSignal(Signal),

    #[error("path {0} has a zero token count")]
    ZeroTokenCount(usize),

    #[error("dimension mismatch: {left} vs {right} groups")]
    DimensionMismatch { left: usize, right: usize },

    #[error("window {start}..{end} is outside a sequence of length {len}")]
    WindowOutOfRange { start: usize, end: usize, len: usize },

    #[error("trace line {line}: {reason}")]
    TraceLine { line: usize, reason: String },

    #[error("empty trace")]
    EmptyTrace,

    #[error("program {0} is already terminated")]
    ProgramTerminated(u64),

    #[error("program {0} has not terminated")]
    ProgramNotTerminated(u64),

    #[error("program {0} has no completed expansion")]
    NothingToAggregate(u64),

    #[error("knob {knob} + {step} exceeds resource cap {cap}")]
    CapExceeded { knob: u32, step: u32, cap: u32 },

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

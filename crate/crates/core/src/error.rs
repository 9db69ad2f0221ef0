use std::fmt;

/// Which of the two action constraints an action broke.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Violation {
    /// A channel that is still busy was asked to start a multicast.
    BusyChannel { channel: usize, remaining: u32 },
    /// Two channels started the same message in the same slot.
    DuplicateMessage { message: usize, first: usize, second: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::BusyChannel { channel, remaining } => write!(
                f,
                "busy-channel constraint: channel {channel} has {remaining} slot(s) left but was scheduled"
            ),
            Violation::DuplicateMessage { message, first, second } => write!(
                f,
                "duplicate-message constraint: message {message} started on channels {first} and {second}"
            ),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: expected {expected}, got {found} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("index {index} out of range (len {len})")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("constraint violation: {0}")]
    Constraint(Violation),
    #[error("tape was recorded against an older version of the network")]
    StaleTape,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint schema version {found} is not supported (expected {expected})")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("channel {channel} carries {load} busy slots after {slot} slots")]
    CapacityExceeded { channel: usize, slot: u64, load: u64 },
    #[error("empty batch")]
    EmptyBatch,
    #[error("experience buffer holds {len} of {capacity} records; refusing a partial update")]
    PartialBuffer { len: usize, capacity: usize },
    #[error("corrupted experience buffer: {0}")]
    CorruptedBuffer(String),
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("no convergence after {iterations} iterations (span {span:e})")]
    NonConvergence { iterations: usize, span: f64 },
    #[error("optimum at the edge of the swept range (threshold {threshold}); widen the sweep")]
    NonInterior { threshold: u64 },
    #[error("not applicable: {0}")]
    NotApplicable(String),
    #[error("target rate {0} outside (0, 1]")]
    RateOutOfRange(f64),
    #[error("linear program failed: {0}")]
    Solver(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Dimension { .. } => "dimension",
            Error::IndexOutOfRange { .. } => "index_out_of_range",
            Error::Constraint(_) => "constraint_violation",
            Error::StaleTape => "stale_tape",
            Error::Checkpoint(_) => "checkpoint",
            Error::SchemaVersion { .. } => "schema_version",
            Error::CapacityExceeded { .. } => "capacity_exceeded",
            Error::EmptyBatch => "empty_batch",
            Error::PartialBuffer { .. } => "partial_buffer",
            Error::CorruptedBuffer(_) => "corrupted_buffer",
            Error::InvalidDistribution(_) => "invalid_distribution",
            Error::NonConvergence { .. } => "non_convergence",
            Error::NonInterior { .. } => "non_interior",
            Error::NotApplicable(_) => "not_applicable",
            Error::RateOutOfRange(_) => "rate_out_of_range",
            Error::Solver(_) => "solver",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

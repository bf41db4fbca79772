use thiserror::Error;

/// Errors raised across the subgoal optimization toolkit.
#[derive(Debug, Error)]
pub enum SegoError {
    /// An id or argument outside the valid domain of the receiving object.
    #[error("input out of domain: {0}")]
    InputDomain(String),

    /// Invalid construction parameters (environments, schedules, configs).
    #[error("invalid configuration: {0}")]
    Configuration(String),

    /// An object whose internal tables are no longer usable (e.g. NaN logits).
    #[error("internal state corrupted: {0}")]
    InternalState(String),

    /// A caller violated a documented contract of the operation.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    /// The unnormalized waypoint target vanishes on the whole grid.
    #[error("degenerate target: {0}")]
    DegenerateTarget(String),

    /// The optimizer lacks positive density in one direction of a move.
    #[error("kernel support violated: {0}")]
    KernelSupport(String),

    /// An object too large to materialize.
    #[error("capacity exceeded: {0}")]
    Capacity(String),

    /// A transition mode not admissible for the requested operation.
    #[error("mode error: {0}")]
    Mode(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, SegoError>;

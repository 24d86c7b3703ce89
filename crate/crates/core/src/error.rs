use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("L1 overflow at step {step} on tile ({x},{y}): footprint {footprint} B exceeds {capacity} B")]
    L1Overflow {
        step: usize,
        x: u32,
        y: u32,
        footprint: u64,
        capacity: u64,
    },
    #[error("deadlock: {remaining} steps never became runnable (first stuck: {stuck:?})")]
    Deadlock { remaining: usize, stuck: Vec<usize> },
    #[error("no tiling candidate satisfies utilization and L1 limits: {0}")]
    NoTiling(String),
    #[error("HBM capacity exceeded: need {required} B, have {available} B")]
    HbmCapacity { required: u64, available: u64 },
}

pub type Result<T> = std::result::Result<T, Error>;

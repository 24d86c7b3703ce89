//! Schedules and the discrete-event tile simulator.

mod exec;
mod report;
mod schedule;

pub use exec::{check_l1, simulate, Mode, SimOutput};
pub use report::{Breakdown, SimReport};
pub use schedule::{
    check_schedule, BufId, BufferDecl, Category, Collective, ReduceOp, Schedule, ScheduleBuilder, Step, StepId, StepKind,
    TensorDecl, TensorId, TensorRegion, VecOp,
};

#[cfg(test)]
mod tests;

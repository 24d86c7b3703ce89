//! Performance and functional simulator for tile-based many-PE accelerators.

pub mod arch;
pub mod dataflows;
pub mod engines;
pub mod error;
pub mod experiment;
pub mod noc;
pub mod numerics;
pub mod sim;
pub mod tiling;
pub mod wafer;

pub use arch::{ArchConfig, PeakSummary, ValidationResult};
pub use error::{Error, Result};
pub use numerics::{AttentionTensors, AttentionVariant, AttentionWorkload, Matrix, SoftmaxState};
pub use noc::{Axis, CollectiveKind, CollectiveRequest, Strategy, TileCoord};
pub use sim::{simulate, Mode, Schedule, SimOutput, SimReport};
pub use wafer::{AttentionDataflow, DecoderLayerSpec, ParallelismPlan, ServingReport, WaferConfig, WaferModel};

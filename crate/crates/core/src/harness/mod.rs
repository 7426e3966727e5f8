//! Command implementations behind the `bsgtune` binary.

pub mod ablate;
pub mod config;
pub mod evaluate;
pub mod lut;
pub mod train;

pub use config::{load_config, RunConfig, RunSection};
pub use train::{train, Checkpoint, EvalRecord, EvalSummary, TrainSummary, Trainer};

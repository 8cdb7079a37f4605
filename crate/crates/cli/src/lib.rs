//! Run configuration and command implementations behind the `ssda` binary.
//! Kept as a library so integration tests can drive whole runs in-process.

pub mod config;
pub mod run;

pub use config::RunConfig;
pub use run::{
    cmd_eval, cmd_generate, cmd_pseudolabel, cmd_sweep, cmd_train, SweepCell, SweepRow,
    TrainOutcome,
};

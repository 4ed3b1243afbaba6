//! Command-line driver for the gscnn library: configuration handling and
//! the train, eval, gradcheck, synth and dump-gates subcommands.

pub mod commands;
pub mod config;

pub use commands::{
    cmd_dump_gates, cmd_eval, cmd_gradcheck, cmd_synth, cmd_train, profile_path, GradcheckOptions, GradcheckSummary,
    TrainSummary,
};
pub use config::{Precision, RunConfig, Settings, DATA_ROOT_ENV};

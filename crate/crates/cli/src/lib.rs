//! Pipeline orchestration for the `lsrl` binary: run configuration, one
//! function per subcommand, artifact writers and the teleoperation server.

pub mod commands;
pub mod config;
pub mod output;
pub mod serve;
pub mod wire;

pub use config::{Driver, RlMode, RunConfig};

//! Library half of the `comba` binary: run configuration parsing and the
//! checkpoint file format. The command implementations live in the binary;
//! everything here is reusable from tests.

pub mod checkpoint;
pub mod config;

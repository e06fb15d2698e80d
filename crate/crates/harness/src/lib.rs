//! Experiment drivers, configuration and result handling for the `netbound`
//! command-line tool.

pub mod config;
pub mod experiments;
pub mod results;
pub mod studies;

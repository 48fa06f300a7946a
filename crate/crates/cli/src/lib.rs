//! Configuration handling, execution and reporting behind the `lazydyn` binary.

pub mod config;
pub mod report;
pub mod runner;

//! Library side of the workbench CLI: config files, run manifests,
//! experiment orchestration, and the command implementations.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod manifest;

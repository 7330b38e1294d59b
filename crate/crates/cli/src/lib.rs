//! Experiment driver for the one-step distillation lab: TOML run configs,
//! the `SBCK` checkpoint format, run manifests and the command
//! implementations behind the `sbrush` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod manifest;
pub mod models;

//! Pipeline, experiments and file formats behind the `mbcap` command.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod pipeline;

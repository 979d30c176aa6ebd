//! Dataset synthesis, training, evaluation, ablation, benchmarking and
//! scoring for the SELD models in `seld-core`.

pub mod bench;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod grid;
pub mod io;
pub mod score;
pub mod train;

pub use error::CliError;

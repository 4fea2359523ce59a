//! File formats, run bookkeeping, threading and the command-line pipeline
//! around `impervia-core`.

pub mod ascii;
pub mod checkpoint;
pub mod cli;
pub mod config;
mod error;
pub mod exec;
pub mod fixtures;
pub mod igrd;
pub mod manifest;
pub mod pipeline;
pub mod plot;
pub mod tables;

pub use error::{Error, Result};
pub use impervia_core as core;

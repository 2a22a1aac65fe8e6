//! File formats, experiment orchestration and the `multitune` command line
//! on top of [`multitune_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiments;
pub mod io;
pub mod report;
pub mod sweep;

pub use error::{Error, Result};
pub use multitune_core as core;

//! Disk formats, image codecs and the `bladapt` command line around
//! [`bladapt_core`].

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod image_io;
pub mod manifest;

pub use config::{Command, RunConfig};
pub use error::{CliError, Result};

//! File formats, the staged experiment pipeline and the command-line front
//! end around [`simt_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod files;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};

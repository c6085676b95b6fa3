//! Command line and HTTP service for sketch-based image retrieval.

pub mod commands;
pub mod config;
pub mod engine;
pub mod service;

pub use commands::{exit_code, run, Cli};

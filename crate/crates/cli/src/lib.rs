//! Command implementations and the HTTP service behind the `facefill` binary.

pub mod commands;
pub mod service;

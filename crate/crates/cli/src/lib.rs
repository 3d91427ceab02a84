//! Command-line workflows and the demo HTTP service.

pub mod commands;
pub mod server;

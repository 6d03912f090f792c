//! Library side of the `eigenpinn` binary: configuration, artifact I/O and
//! the subcommands, exposed so integration tests can drive them directly.

pub mod commands;
pub mod config;
pub mod io;

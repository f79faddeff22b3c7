//! Library side of the `ncs` command, split out so the commands can be
//! driven from tests without spawning a process.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

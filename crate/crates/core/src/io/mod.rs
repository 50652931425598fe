//! File formats and the command-line front end.

pub mod cli;
pub mod manifest;
pub mod predictions;
pub mod tpse;

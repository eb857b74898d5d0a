//! File formats, configuration and the command-line front end for
//! [`srtg_core`].

pub mod cli;
pub mod config;
pub mod formats;
pub mod report;

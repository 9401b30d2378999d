//! Data, configuration, exports and the command line.

pub mod cli;
pub mod config;
pub mod data;
pub mod export;
pub mod idx;
pub mod selfcheck;

//! Library side of the `cil` binary: configuration, the run grid, summaries
//! and figures. Every output can be rebuilt from the files a run leaves on
//! disk.

pub mod config;
pub mod grid;
pub mod inspect;
pub mod plot;

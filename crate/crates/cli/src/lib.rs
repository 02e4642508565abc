//! File formats, reports, experiment drivers and the `slamcert` command set.

pub mod commands;
pub mod experiments;
pub mod io;
pub mod report;

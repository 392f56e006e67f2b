//! Configuration ingestion, file formats, bundled fixtures and report
//! writers behind the command-line binary.

pub mod config;
pub mod fixtures;
pub mod formats;
pub mod report;

//! File formats, data ingest, reports, the review service and the CLI for
//! `policyprobe-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod fixture;
pub mod report;
pub mod service;
pub mod store;

//! File formats, dataset ingestion, reports and run orchestration for
//! `repapq-core`.

pub mod config;
pub mod data;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod report;
pub mod store;
pub mod weights;

pub use error::{Error, Result};

//! Data loading, splitting, configuration and the staged experiment driver.

pub mod config;
pub mod data;
pub mod ingest;
pub mod run;
pub mod split;

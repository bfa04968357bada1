//! Data synthesis, configuration, persistence and the end-to-end pipeline.

pub mod config;
pub mod dataset;
pub mod experiment;
pub mod report;
pub mod tensor;

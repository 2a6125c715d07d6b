pub mod config;
pub mod dataset;
pub mod embed;
pub mod experiment;
pub mod plot;
pub mod report;
pub mod sweep;

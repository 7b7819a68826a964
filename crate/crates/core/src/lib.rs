//! Flood / non-flood aerial image classification: annotation curation,
//! balanced sampling, a model zoo, training, evaluation and label auditing.

pub mod catalog;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod evaluation;
pub mod models;
pub mod training;

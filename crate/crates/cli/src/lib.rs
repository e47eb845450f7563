//! Experiment driver: dataset generation, training, scoring, evaluation and
//! reporting as separate, checksummed stages under one run directory.

pub mod config;
pub mod manifest;
pub mod stages;

pub use config::ExperimentConfig;
pub use stages::{eval, gen, report, score, train, Stage, Summary};

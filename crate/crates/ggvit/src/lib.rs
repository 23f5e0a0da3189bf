//! Data pipeline, training, evaluation and reporting for the ggvit detector.

pub mod cli;
pub mod config;
pub mod data;
pub mod io;
pub mod report;
pub mod trainer;

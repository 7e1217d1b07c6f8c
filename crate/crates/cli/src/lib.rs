//! Experiment driver: data generation, meta-training, evaluation, online
//! adaptation and reporting, each writing CSV/JSON artifacts plus a manifest.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;

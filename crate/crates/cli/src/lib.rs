//! Command-line driver and HTTP service around `coughdetect-core`.

pub mod commands;
pub mod config;
pub mod service;

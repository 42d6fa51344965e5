//! Command-line entry points and the HTTP scenario service.

pub mod cli;
pub mod service;

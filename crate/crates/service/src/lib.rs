//! HTTP API and command-line front end over `caplens-core`.

pub mod api;
pub mod cli;
pub mod config;
pub mod error;
pub mod ops;

//! HTTP service and command-line interface over the mining engine.

pub mod cli;
pub mod config;
pub mod server;

pub use config::{ApiConfig, ProviderSettings};
pub use server::{router, serve, AppState};

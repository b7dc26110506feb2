//! HTTP/WebSocket service and command-line client for the telemetry
//! platform.

pub mod api;
pub mod client;
pub mod config;
pub mod server;

pub use config::{load_config, ConfigError, ServiceConfig};
pub use server::{run, ServiceError, ServiceHandle};

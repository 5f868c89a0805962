//! HTTP API and operator CLI for the nestery control plane.

pub mod cli;
pub mod config;
pub mod error;
pub mod http;
pub mod service;

pub use config::ApiConfig;
pub use error::{ApiError, ErrorKind};
pub use service::{Service, ServiceConfig};

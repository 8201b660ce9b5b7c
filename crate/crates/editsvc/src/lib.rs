//! Edit service: job store, worker pool and HTTP API.

pub mod http;
pub mod jobs;
pub mod service;

pub use http::router;
pub use service::{Service, ServiceConfig};

//! HTTP service and configuration for the governed memory engine.

pub mod config;
pub mod http;
pub mod oplog;

//! Governed memory engine: entity-scoped memory extraction and retrieval,
//! governance routing, schema lifecycle and evaluation.

pub mod clock;
pub mod model;
pub mod providers;
pub mod redaction;
pub mod store;
pub mod extraction;
pub mod schema;
pub mod consolidation;
pub mod governance;
pub mod retrieval;
pub mod engine;
pub mod eval;

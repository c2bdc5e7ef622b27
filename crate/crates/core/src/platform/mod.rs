//! Persistence, configuration, command-line entry points and the HTTP service.

pub mod archive;
pub mod commands;
pub mod config;
pub mod server;
pub mod store;
pub mod wire;

pub use archive::{decode_base, decode_concept, encode_base, encode_concept};
pub use config::Config;
pub use store::{ConceptInfo, ConceptStore, STORE_ENV};

#[cfg(test)]
mod server_tests;

pub mod bench;
pub mod config;
mod error;
pub mod ingest;
pub mod service;
pub mod store;

pub use error::{Error, Result};

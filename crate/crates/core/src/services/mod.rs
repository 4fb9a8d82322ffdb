//! The three daemons: a per-host activation node, and a per-cluster producer
//! and manager.
//!
//! Data path: instrumented process → spool file → node → producer → filtered
//! subscriber endpoints. Control path: user → manager → node (polling) →
//! trigger file → instrumented process.

mod manager;
mod node;
mod producer;

use std::path::PathBuf;

use thiserror::Error;

pub use manager::{Manager, ManagerConfig};
pub use node::{pid_alive, scan, Node, NodeConfig, NodeStats};
pub use producer::{Producer, ProducerConfig, ProducerStats};

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("cannot bind {addr}: {source}")]
    Bind {
        addr: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Path { path: PathBuf, message: String },
    #[error(transparent)]
    Activation(#[from] crate::control::ActivationError),
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

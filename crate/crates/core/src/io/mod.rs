//! Files: the tensor container, configuration text and checkpoints.

pub mod config;
pub mod container;

pub use config::{Config, ConfigError};
pub use container::{Container, ContainerError, Entry, Payload};

pub mod bag;
pub mod cli;
pub mod clock;
pub mod config;
pub mod error;
pub mod faircheck;
pub mod http;
pub mod metadata;
pub mod peaks;
pub mod registry;
pub mod tasking;
pub mod uq;

pub use error::{FabricError, Result};

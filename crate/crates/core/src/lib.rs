//! Continual event extraction over a stream of disjoint event-type tasks.

pub mod arguments;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod detection;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod memory;
pub mod pipeline;
pub mod rng;

pub use error::{Error, Result};

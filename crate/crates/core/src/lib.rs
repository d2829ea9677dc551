//! Concept-based reinforcement learning on language-conditioned grid worlds.

pub mod agent;
pub mod diffcore;
pub mod encoder;
pub mod env;
pub mod error;
pub mod harness;
pub mod mi;

pub use error::{Error, Result};

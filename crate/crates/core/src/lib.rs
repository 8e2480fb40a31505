//! Range-limited multi-agent communication with gated two-hop message
//! passing, its learning machinery and benchmark environments.

pub mod commgraph;
pub mod diffmath;
pub mod envs;
pub mod error;
pub mod harness;
pub mod learning;
pub mod neural;
pub mod protocol;

pub use error::{Error, Result};

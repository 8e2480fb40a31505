//! Minimal reverse-mode automatic differentiation over dense matrices.

mod matrix;
mod params;
mod tape;

pub use matrix::Matrix;
pub use params::ParamStore;
pub use tape::{leaky, sigmoid, softmax_in_place, Adjacency, Tape, Var, LEAKY_SLOPE};

#[cfg(test)]
pub(crate) mod fd;

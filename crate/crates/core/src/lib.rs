//! Chow-Liu tree learning and the large-deviation error exponent of
//! structure learning for discrete tree-structured distributions.

pub mod chow_liu;
pub mod crossover;
pub mod dist;
pub mod error;
pub mod exponent;
pub mod serde_rate;
pub mod simulate;
pub mod trees;

pub use error::{Error, Result};

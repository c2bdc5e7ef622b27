pub mod adapters;
pub mod backbone;
pub mod error;
pub mod evalharness;
pub mod imageio;
pub mod inference;
pub mod losses;
pub mod trainer;
#[cfg(test)]
pub(crate) mod testutil;
pub mod nn;
pub mod platform;
pub mod sketchrep;
pub mod tensor;

pub use error::{Error, Result};

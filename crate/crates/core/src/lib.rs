//! Toy-model laboratory for feature absorption in sparse autoencoders.

pub mod analysis;
pub mod error;
pub mod io;
pub mod probes;
pub mod sae;
pub mod scenarios;
pub mod svg;
pub mod synthgen;
pub mod theory;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};

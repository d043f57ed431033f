//! Train small networks on a log-spaced checkpoint schedule, interpolate
//! linearly between any checkpoint and the final state, and measure how
//! loss and error behave along the path.

pub mod analysis;
pub mod checkpoint;
pub mod data;
mod error;
pub mod experiment;
pub mod fmt;
pub mod interp;
pub mod nn;
pub mod trainer;

pub use error::{Error, Result};

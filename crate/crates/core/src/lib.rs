//! Sparse-view parallel-beam CT reconstruction.
//!
//! Two reconstruction routes share one projection model: classical filtered
//! back projection, and a convolutional network that maps the stack of
//! single-view back projections to the image.

pub mod cli;
pub mod error;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod projection;

pub use error::{Error, Result};

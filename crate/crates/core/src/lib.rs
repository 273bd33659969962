//! Binaural rendering by Fourier-domain shift and scale of a mono source,
//! conditioned on the source pose.

pub mod data;
pub mod dsp;
pub mod losses;
mod error;
pub mod model;
pub mod trainer;

pub use error::{NfsError, Result};

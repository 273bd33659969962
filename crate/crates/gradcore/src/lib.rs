//! Dense `f64` tensors, a reverse-mode tape, finite-difference gradient
//! checking, Rectified Adam, and a binary checkpoint container.

mod check;
mod error;
pub mod fft;
pub mod kernels;
mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use check::{grad_check, grad_check_report, Coverage, GradCheckReport};
pub use error::{GradError, Result};
pub use optim::{clip_global_norm, RAdamState};
pub use params::{Checkpoint, Manifest, ManifestEntry, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

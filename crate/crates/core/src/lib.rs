//! PFGM++ electrostatic generative models and inverse Poisson flow matching
//! distillation on low-dimensional toy data.

pub mod denoiser;
pub mod error;
pub mod eval;
pub mod field;
pub mod io;
pub mod ipfm;
pub mod kernel;
pub mod numerics;
pub mod teacher;

pub use error::{Error, Result};
pub use kernel::{AuxDim, DimSpec, NoiseLevel, NoiseSchedule};
pub use numerics::{AdamState, Mlp, RngState};

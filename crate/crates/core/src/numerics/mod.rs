//! Deterministic numerical substrate: seeded randomness, a small MLP with
//! manual reverse mode, and Adam.

mod adam;
mod mlp;
mod rng;

pub use adam::{adam_step, AdamState, LrSchedule};
pub use mlp::{sigma_embedding, stack_rows, Activation, ForwardTrace, Mlp};
pub(crate) use mlp::{read_u32, read_u64};
pub use rng::{sample_unit_sphere, RngState};

/// Squared Euclidean norm.
pub fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

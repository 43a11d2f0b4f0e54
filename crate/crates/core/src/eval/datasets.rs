//! Built-in 2-D toy distributions.
//!
//! Every set is centered to zero empirical mean after drawing.
//!
//! - `eight_gaussians`: mode `k ~ U{0..7}`, `4 (cos 2πk/8, sin 2πk/8) + 0.2 ε`.
//! - `two_moons`: `t ~ U[0, π]`; upper arc `(cos t, sin t)`, lower arc
//!   `(1 - cos t, 0.5 - sin t)`, each with equal probability, plus `0.1 ε`.
//! - `checkerboard`: `a ~ U[-2, 2]`, `b = U[0, 1) - 2 B + (floor(a) mod 2)`
//!   with `B ~ Bernoulli(1/2)`, returned as `2 (a, b)`.
//! - `spiral`: `u ~ U[0, 1]`, `θ = 3π sqrt(u)`, `4 (θ / 3π) (cos θ, sin θ) + 0.1 ε`.

use std::f64::consts::PI;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::ChargeSet;
use crate::numerics::RngState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Builtin {
    EightGaussians,
    TwoMoons,
    Checkerboard,
    Spiral,
}

impl Builtin {
    pub const ALL: [Builtin; 4] = [
        Builtin::EightGaussians,
        Builtin::TwoMoons,
        Builtin::Checkerboard,
        Builtin::Spiral,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Builtin::EightGaussians => "eight_gaussians",
            Builtin::TwoMoons => "two_moons",
            Builtin::Checkerboard => "checkerboard",
            Builtin::Spiral => "spiral",
        }
    }

    /// One raw (uncentered) draw.
    pub fn draw(self, rng: &mut RngState) -> Vec<f64> {
        match self {
            Builtin::EightGaussians => {
                let k = rng.index(8) as f64;
                let a = 2.0 * PI * k / 8.0;
                vec![4.0 * a.cos() + 0.2 * rng.normal(), 4.0 * a.sin() + 0.2 * rng.normal()]
            }
            Builtin::TwoMoons => {
                let t = PI * rng.uniform();
                let upper = rng.uniform() < 0.5;
                let (x, y) = if upper {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                vec![x + 0.1 * rng.normal(), y + 0.1 * rng.normal()]
            }
            Builtin::Checkerboard => {
                let a = 4.0 * rng.uniform() - 2.0;
                let flip = if rng.uniform() < 0.5 { 2.0 } else { 0.0 };
                let b = rng.uniform() - flip + a.floor().rem_euclid(2.0);
                vec![2.0 * a, 2.0 * b]
            }
            Builtin::Spiral => {
                let theta = 3.0 * PI * rng.uniform().sqrt();
                let r = 4.0 * theta / (3.0 * PI);
                vec![r * theta.cos() + 0.1 * rng.normal(), r * theta.sin() + 0.1 * rng.normal()]
            }
        }
    }
}

impl FromStr for Builtin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Builtin::ALL
            .into_iter()
            .find(|b| b.name() == s.trim())
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown dataset {s:?}; expected one of eight_gaussians, two_moons, checkerboard, spiral"
                ))
            })
    }
}

/// `n_points` draws of the named distribution, centered, as equal-weight charges.
pub fn builtin_dataset(name: &str, n_points: usize, rng: &mut RngState) -> Result<ChargeSet> {
    let kind: Builtin = name.parse()?;
    if n_points == 0 {
        return Err(Error::config("dataset needs at least one point"));
    }
    let mut pts: Vec<Vec<f64>> = (0..n_points).map(|_| kind.draw(rng)).collect();
    let mut mean = [0.0; 2];
    for p in &pts {
        mean[0] += p[0] / n_points as f64;
        mean[1] += p[1] / n_points as f64;
    }
    for p in &mut pts {
        p[0] -= mean[0];
        p[1] -= mean[1];
    }
    ChargeSet::uniform(pts)
}

//! Perturbation kernels, priors and noise schedules.
//!
//! The canonical noise coordinate is `sigma`. For a finite auxiliary dimension
//! `D` the augmented radius is derived as `r = sigma * sqrt(D)`; the kernel is
//!
//! ```text
//! p_r(x | y)  ∝  (|x - y|^2 + r^2)^(-(N + D) / 2)
//! ```
//!
//! and `D = ∞` is the Gaussian kernel `N(y, sigma^2 I)`.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::numerics::{dist_sq, sample_unit_sphere, RngState};

/// Number of auxiliary dimensions: a positive integer or the diffusion limit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AuxDim {
    Finite(u64),
    Infinite,
}

impl AuxDim {
    pub fn is_infinite(self) -> bool {
        matches!(self, AuxDim::Infinite)
    }

    pub fn finite(self) -> Option<u64> {
        match self {
            AuxDim::Finite(d) => Some(d),
            AuxDim::Infinite => None,
        }
    }
}

impl fmt::Display for AuxDim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AuxDim::Finite(d) => write!(f, "{d}"),
            AuxDim::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for AuxDim {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") || t == "∞" {
            return Ok(AuxDim::Infinite);
        }
        match t.parse::<u64>() {
            Ok(0) => Err(Error::config("auxiliary dimension must be >= 1")),
            Ok(d) => Ok(AuxDim::Finite(d)),
            Err(_) => Err(Error::config(format!("bad auxiliary dimension {s:?}"))),
        }
    }
}

impl Serialize for AuxDim {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AuxDim::Finite(d) => s.serialize_u64(*d),
            AuxDim::Infinite => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for AuxDim {
    fn deserialize<De: Deserializer<'de>>(d: De) -> std::result::Result<Self, De::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(u64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(0) => Err(serde::de::Error::custom("auxiliary dimension must be >= 1")),
            Raw::Int(v) => Ok(AuxDim::Finite(v)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Data dimension `N` and auxiliary dimension `D`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DimSpec {
    pub data_dim: usize,
    pub aux_dim: AuxDim,
}

impl DimSpec {
    pub fn new(data_dim: usize, aux_dim: AuxDim) -> Result<Self> {
        if data_dim == 0 {
            return Err(Error::config("data dimension must be >= 1"));
        }
        if aux_dim == AuxDim::Finite(0) {
            return Err(Error::config("auxiliary dimension must be >= 1"));
        }
        Ok(Self { data_dim, aux_dim })
    }

    pub fn finite(data_dim: usize, d: u64) -> Result<Self> {
        Self::new(data_dim, AuxDim::Finite(d))
    }

    pub fn infinite(data_dim: usize) -> Result<Self> {
        Self::new(data_dim, AuxDim::Infinite)
    }

    /// `sqrt(D)` for finite `D`.
    pub fn sqrt_aux(&self) -> Option<f64> {
        self.aux_dim.finite().map(|d| (d as f64).sqrt())
    }

    /// Augmented radius `r = sigma * sqrt(D)`.
    pub fn radius(&self, sigma: f64) -> Option<f64> {
        self.sqrt_aux().map(|s| sigma * s)
    }
}

/// A noise level in canonical form. `r` is always derived from `sigma`, never the reverse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseLevel {
    sigma: f64,
    sqrt_aux: Option<f64>,
}

impl NoiseLevel {
    pub fn new(sigma: f64, spec: &DimSpec) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(Self {
            sigma,
            sqrt_aux: spec.sqrt_aux(),
        })
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn r(&self) -> Option<f64> {
        self.sqrt_aux.map(|s| self.sigma * s)
    }

    /// `r / sigma`, which is `sqrt(D)` by construction.
    pub fn r_over_sigma(&self) -> Option<f64> {
        self.sqrt_aux
    }
}

pub(crate) fn check_sigma(sigma: f64) -> Result<()> {
    if sigma > 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::contract(format!("sigma must be positive and finite, got {sigma}")))
    }
}

/// Rho-warped noise schedule between `sigma_min` and `sigma_max`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub t_max: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            t_max: 0.98,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::config(format!(
                "need 0 < sigma_min < sigma_max, got {} and {}",
                self.sigma_min, self.sigma_max
            )));
        }
        if !(self.rho > 0.0) {
            return Err(Error::config("rho must be positive"));
        }
        if !(0.0..=1.0).contains(&self.t_max) {
            return Err(Error::config("t_max must lie in [0, 1]"));
        }
        Ok(())
    }

    fn warp(&self, t: f64) -> f64 {
        let a = self.sigma_max.powf(1.0 / self.rho);
        let b = self.sigma_min.powf(1.0 / self.rho);
        (a + (1.0 - t) * (b - a)).powf(self.rho)
    }

    /// `sigma(t) = (sigma_max^(1/rho) + (1 - t)(sigma_min^(1/rho) - sigma_max^(1/rho)))^rho`.
    pub fn sigma_of_t(&self, t: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::contract(format!("t must lie in [0, 1], got {t}")));
        }
        Ok(if t == 0.0 {
            self.sigma_min
        } else if t == 1.0 {
            self.sigma_max
        } else {
            self.warp(t)
        })
    }

    /// `t ~ U[0, t_max]`, returned as `sigma(t)`.
    pub fn sample_training_sigma(&self, rng: &mut RngState) -> f64 {
        let t = rng.uniform() * self.t_max;
        // t_max <= 1 so this is in range
        self.sigma_of_t(t).expect("t in [0, t_max]")
    }

    /// `K` levels from `sigma_max` down to `sigma_min` with rho-power spacing.
    pub fn karras_grid(&self, k: usize) -> Result<Vec<f64>> {
        if k < 2 {
            return Err(Error::config(format!("a sigma grid needs K >= 2 points, got {k}")));
        }
        self.validate()?;
        let last = (k - 1) as f64;
        Ok((0..k)
            .map(|i| match i {
                0 => self.sigma_max,
                i if i == k - 1 => self.sigma_min,
                i => self.warp(1.0 - i as f64 / last),
            })
            .collect())
    }
}

/// `u ~ Beta(a, b)` as `G_a / (G_a + G_b)` with Gamma draws.
pub fn beta_sample(a: f64, b: f64, rng: &mut RngState) -> Result<f64> {
    let (ga, gb) = gamma_pair(a, b, rng)?;
    Ok(ga / (ga + gb))
}

fn gamma_pair(a: f64, b: f64, rng: &mut RngState) -> Result<(f64, f64)> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::contract(format!("beta shapes must be positive, got ({a}, {b})")));
    }
    let da = Gamma::new(a, 1.0).map_err(|e| Error::contract(e.to_string()))?;
    let db = Gamma::new(b, 1.0).map_err(|e| Error::contract(e.to_string()))?;
    loop {
        let ga = da.sample(rng);
        let gb = db.sample(rng);
        if ga + gb > 0.0 && gb > 0.0 {
            return Ok((ga, gb));
        }
    }
}

/// Perturbation radius `R` for finite `D`.
///
/// With `u = R^2 / (R^2 + r^2)` the radial density becomes `Beta(N/2, D/2)`,
/// so `R = r * sqrt(u / (1 - u))`. The ratio `u / (1 - u)` is taken directly
/// as `G_a / G_b` from the two Gamma draws behind the Beta sample.
pub fn radial_sample(spec: &DimSpec, sigma: f64, rng: &mut RngState) -> Result<f64> {
    check_sigma(sigma)?;
    let Some(d) = spec.aux_dim.finite() else {
        return Err(Error::Dispatch(
            "radial sampling is only defined for finite D; use the Gaussian path".into(),
        ));
    };
    let r = spec.radius(sigma).expect("finite");
    let (ga, gb) = gamma_pair(spec.data_dim as f64 / 2.0, d as f64 / 2.0, rng)?;
    Ok(r * (ga / gb).sqrt())
}

/// Draw the displacement `x - y` of the perturbation kernel.
pub fn sample_displacement(spec: &DimSpec, sigma: f64, rng: &mut RngState) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    let n = spec.data_dim;
    match spec.aux_dim {
        AuxDim::Infinite => Ok(rng.normal_vec(n).into_iter().map(|e| sigma * e).collect()),
        AuxDim::Finite(_) => {
            let radius = radial_sample(spec, sigma, rng)?;
            let v = sample_unit_sphere(n, rng)?;
            Ok(v.into_iter().map(|c| radius * c).collect())
        }
    }
}

/// `x ~ p_sigma(. | y)`.
pub fn perturb(y: &[f64], spec: &DimSpec, sigma: f64, rng: &mut RngState) -> Result<Vec<f64>> {
    if y.len() != spec.data_dim {
        return Err(Error::contract(format!(
            "point of length {} for data dimension {}",
            y.len(),
            spec.data_dim
        )));
    }
    let delta = sample_displacement(spec, sigma, rng)?;
    Ok(y.iter().zip(delta).map(|(a, b)| a + b).collect())
}

/// Draw from the prior at `sigma_level`: the kernel centred at the origin.
pub fn prior_sample(spec: &DimSpec, sigma_level: f64, rng: &mut RngState) -> Result<Vec<f64>> {
    sample_displacement(spec, sigma_level, rng)
}

/// Unnormalized log kernel density.
///
/// Finite `D`: `-(N + D)/2 * ln(|x - y|^2 + r^2)`; `D = ∞`: `-|x - y|^2 / (2 sigma^2)`.
pub fn kernel_log_density_unnorm(x: &[f64], y: &[f64], spec: &DimSpec, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    if x.len() != spec.data_dim || y.len() != spec.data_dim {
        return Err(Error::contract("kernel density: dimension mismatch"));
    }
    let d2 = dist_sq(x, y);
    Ok(match spec.aux_dim {
        AuxDim::Infinite => -d2 / (2.0 * sigma * sigma),
        AuxDim::Finite(d) => {
            let r = spec.radius(sigma).expect("finite");
            -((spec.data_dim as f64 + d as f64) / 2.0) * (d2 + r * r).ln()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn sigma_endpoints_exact() {
        assert_eq!(sched().sigma_of_t(0.0).unwrap(), 0.002);
        assert_eq!(sched().sigma_of_t(1.0).unwrap(), 80.0);
    }

    #[test]
    fn sigma_midpoint_matches_external_evaluation() {
        // 30-digit evaluation of the closed form at t = 0.5
        let expected = 2.515_218_976_147_158_6;
        let got = sched().sigma_of_t(0.5).unwrap();
        assert!((got - expected).abs() < 1e-12 * expected, "{got}");
    }

    #[test]
    fn sigma_out_of_range() {
        assert!(matches!(sched().sigma_of_t(-0.1), Err(Error::Contract(_))));
        assert!(matches!(sched().sigma_of_t(1.5), Err(Error::Contract(_))));
    }

    #[test]
    fn sigma_monotone() {
        let s = sched();
        let mut prev = 0.0;
        for i in 0..=1000 {
            let v = s.sigma_of_t(i as f64 / 1000.0).unwrap();
            assert!(v > prev);
            prev = v;
        }
    }

    #[test]
    fn grid_endpoints_and_monotonicity() {
        let s = sched();
        assert_eq!(s.karras_grid(2).unwrap(), vec![80.0, 0.002]);
        let g = s.karras_grid(35).unwrap();
        assert_eq!(g.len(), 35);
        assert_eq!(g[0], 80.0);
        assert_eq!(g[34], 0.002);
        assert!(g.windows(2).all(|w| w[1] - w[0] < 0.0));
        assert!(matches!(s.karras_grid(1), Err(Error::Config(_))));
    }

    #[test]
    fn grid_matches_sigma_of_t() {
        let s = sched();
        let g = s.karras_grid(11).unwrap();
        for (i, v) in g.iter().enumerate() {
            let t = 1.0 - i as f64 / 10.0;
            assert!((v - s.sigma_of_t(t).unwrap()).abs() < 1e-12 * v);
        }
    }

    #[test]
    fn aux_dim_parsing() {
        assert_eq!("inf".parse::<AuxDim>().unwrap(), AuxDim::Infinite);
        assert_eq!("16".parse::<AuxDim>().unwrap(), AuxDim::Finite(16));
        assert!("0".parse::<AuxDim>().is_err());
        assert!("x".parse::<AuxDim>().is_err());
        let j = serde_json::to_string(&AuxDim::Infinite).unwrap();
        assert_eq!(j, "\"inf\"");
        assert_eq!(serde_json::from_str::<AuxDim>("128").unwrap(), AuxDim::Finite(128));
    }

    #[test]
    fn dimspec_validation() {
        assert!(DimSpec::finite(0, 2).is_err());
        assert!(DimSpec::finite(2, 0).is_err());
        assert!(DimSpec::infinite(3).is_ok());
    }

    #[test]
    fn radial_rejects_infinite() {
        let spec = DimSpec::infinite(2).unwrap();
        assert!(matches!(
            radial_sample(&spec, 1.0, &mut RngState::new(0)),
            Err(Error::Dispatch(_))
        ));
    }

    #[test]
    fn radial_median_for_n2_d2() {
        // Beta(1, 1) is uniform; u = 1/2 maps to R = r.
        let spec = DimSpec::finite(2, 2).unwrap();
        let sigma = 0.7;
        let r = spec.radius(sigma).unwrap();
        let mut rng = RngState::new(10);
        let mut rs: Vec<f64> = (0..100_000)
            .map(|_| radial_sample(&spec, sigma, &mut rng).unwrap())
            .collect();
        rs.sort_by(f64::total_cmp);
        let median = rs[rs.len() / 2];
        assert!((median / r - 1.0).abs() < 0.02, "median {median} vs r {r}");
    }

    #[test]
    fn perturb_degenerate_sigma() {
        let y = [1.0, -2.0, 0.5];
        for aux in [AuxDim::Infinite, AuxDim::Finite(4), AuxDim::Finite(2048)] {
            let spec = DimSpec::new(3, aux).unwrap();
            let x = perturb(&y, &spec, 1e-12, &mut RngState::new(1)).unwrap();
            for (a, b) in x.iter().zip(y) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn perturb_rejects_bad_sigma() {
        let spec = DimSpec::finite(2, 2).unwrap();
        assert!(matches!(perturb(&[0.0, 0.0], &spec, 0.0, &mut RngState::new(0)), Err(Error::Contract(_))));
        assert!(matches!(perturb(&[0.0, 0.0], &spec, -1.0, &mut RngState::new(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn gaussian_path_moments() {
        let spec = DimSpec::infinite(2).unwrap();
        let mut rng = RngState::new(2);
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let x = perturb(&[0.0, 0.0], &spec, 1.0, &mut rng).unwrap();
            for k in 0..2 {
                sum[k] += x[k];
                sq[k] += x[k] * x[k];
            }
        }
        for k in 0..2 {
            let mean = sum[k] / n as f64;
            let var = sq[k] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.02);
            assert!((var - 1.0).abs() < 0.03);
        }
    }

    #[test]
    fn prior_gaussian_scale() {
        let spec = DimSpec::infinite(2).unwrap();
        let mut rng = RngState::new(3);
        let n = 100_000;
        let mut sq = 0.0;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let x = prior_sample(&spec, 2.5, &mut rng).unwrap();
            sq += x[0] * x[0];
            mean[0] += x[0];
            mean[1] += x[1];
        }
        let std = (sq / n as f64).sqrt();
        assert!((std / 2.5 - 1.0).abs() < 0.02);
        let mnorm = (mean[0].powi(2) + mean[1].powi(2)).sqrt() / n as f64;
        assert!(mnorm < 0.02 * 2.5);
    }

    #[test]
    fn prior_finite_isotropic() {
        let spec = DimSpec::finite(2, 8).unwrap();
        let mut rng = RngState::new(4);
        let n = 100_000;
        let mut mean = [0.0; 2];
        for _ in 0..n {
            let x = prior_sample(&spec, 1.0, &mut rng).unwrap();
            mean[0] += x[0];
            mean[1] += x[1];
        }
        let mnorm = (mean[0].powi(2) + mean[1].powi(2)).sqrt() / n as f64;
        assert!(mnorm < 0.02);
    }

    #[test]
    fn log_density_special_values() {
        let spec = DimSpec::finite(2, 6).unwrap();
        let sigma: f64 = 0.3;
        let y = [0.4, 0.1];
        let v = kernel_log_density_unnorm(&y, &y, &spec, sigma).unwrap();
        let expected = -(8.0) * (sigma * 6f64.sqrt()).ln();
        assert!((v - expected).abs() < 1e-12);
        let inf = DimSpec::infinite(2).unwrap();
        let v = kernel_log_density_unnorm(&[0.3, 0.0], &[0.0, 0.0], &inf, 0.3).unwrap();
        assert!((v + 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_density_large_d_approaches_gaussian() {
        let sigma = 0.8;
        let big = DimSpec::finite(2, 1_000_000).unwrap();
        let inf = DimSpec::infinite(2).unwrap();
        let y = [0.0, 0.0];
        let a = [0.5, -0.2];
        let b = [1.3, 0.9];
        let diff_big = kernel_log_density_unnorm(&a, &y, &big, sigma).unwrap()
            - kernel_log_density_unnorm(&b, &y, &big, sigma).unwrap();
        let diff_inf = kernel_log_density_unnorm(&a, &y, &inf, sigma).unwrap()
            - kernel_log_density_unnorm(&b, &y, &inf, sigma).unwrap();
        assert!((diff_big - diff_inf).abs() < 1e-3, "{diff_big} vs {diff_inf}");
    }

    #[test]
    fn beta_rejects_bad_shape() {
        assert!(matches!(beta_sample(0.0, 1.0, &mut RngState::new(0)), Err(Error::Contract(_))));
        assert!(matches!(beta_sample(1.0, -2.0, &mut RngState::new(0)), Err(Error::Contract(_))));
    }

    #[test]
    fn beta_mean_within_three_standard_errors() {
        let mut rng = RngState::new(5);
        for (a, b) in [(0.5, 1.0), (1.0, 4.0), (3.0, 32.0)] {
            let n = 100_000;
            let xs: Vec<f64> = (0..n).map(|_| beta_sample(a, b, &mut rng).unwrap()).collect();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = a * b / ((a + b).powi(2) * (a + b + 1.0));
            let se = (var / n as f64).sqrt();
            assert!((mean - a / (a + b)).abs() < 3.0 * se, "({a},{b}) mean {mean}");
        }
    }

    #[test]
    fn noise_level_ratio_is_sqrt_d() {
        let spec = DimSpec::finite(2, 128).unwrap();
        let lvl = NoiseLevel::new(0.37, &spec).unwrap();
        assert_eq!(lvl.r_over_sigma().unwrap(), 128f64.sqrt());
        assert_eq!(lvl.r().unwrap(), 0.37 * 128f64.sqrt());
        assert!(NoiseLevel::new(0.0, &spec).is_err());
        let inf = NoiseLevel::new(1.0, &DimSpec::infinite(2).unwrap()).unwrap();
        assert!(inf.r().is_none());
    }
}

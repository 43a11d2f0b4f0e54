//! Exact electrostatics of a finite weighted charge set: the augmented field,
//! the closed-form posterior-mean denoiser and its input gradient.

use std::io::Read;
use std::path::Path;

use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::kernel::{check_sigma, AuxDim, DimSpec};
use crate::numerics::{dist_sq, RngState};

/// Finite weighted point set in `R^N`. Weights are normalized on construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ChargeSet {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl ChargeSet {
    /// Equal weights.
    pub fn uniform(points: Vec<Vec<f64>>) -> Result<Self> {
        let n = points.len();
        Self::weighted(points, vec![1.0; n])
    }

    pub fn weighted(points: Vec<Vec<f64>>, weights: Vec<f64>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::config("charge set is empty"));
        };
        let dim = first.len();
        if dim == 0 {
            return Err(Error::config("charge points must have dimension >= 1"));
        }
        if weights.len() != points.len() {
            return Err(Error::config(format!(
                "{} points but {} weights",
                points.len(),
                weights.len()
            )));
        }
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::config(format!("charge weights must be positive, got {w}")));
        }
        let mut flat = Vec::with_capacity(points.len() * dim);
        for (i, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(Error::config(format!(
                    "point {i} has dimension {} but the first has {dim}",
                    p.len()
                )));
            }
            if p.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("point {i} is not finite")));
            }
            flat.extend_from_slice(p);
        }
        let total: f64 = weights.iter().sum();
        let weights: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let log_weights = weights.iter().map(|w| w.ln()).collect();
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self {
            dim,
            points: flat,
            weights,
            log_weights,
            cumulative,
        })
    }

    /// Read one point per row; a header row is optional.
    ///
    /// A trailing column is read as a weight when its header is `w` or `weight`,
    /// or, without a header, when `data_dim` is given and the row has one extra column.
    pub fn from_csv_reader<R: Read>(reader: R, data_dim: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut points = Vec::new();
        let mut weights = Vec::new();
        let mut weight_col: Option<bool> = None;
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Parse(e.to_string()))?;
            if rec.iter().all(|f| f.is_empty()) {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
            let values = match parsed {
                Ok(v) => v,
                Err(_) if row == 0 && points.is_empty() => {
                    let last = rec.iter().last().unwrap_or("").to_ascii_lowercase();
                    weight_col = Some(last == "w" || last == "weight");
                    continue;
                }
                Err(e) => return Err(Error::Parse(format!("row {}: {e}", row + 1))),
            };
            let has_weight = *weight_col.get_or_insert_with(|| data_dim.is_some_and(|d| values.len() == d + 1));
            let (coords, w) = if has_weight {
                let (c, w) = values.split_at(values.len() - 1);
                (c.to_vec(), w[0])
            } else {
                (values, 1.0)
            };
            if let Some(d) = data_dim {
                if coords.len() != d {
                    return Err(Error::Parse(format!(
                        "row {}: expected {d} coordinates, found {}",
                        row + 1,
                        coords.len()
                    )));
                }
            }
            points.push(coords);
            weights.push(w);
        }
        Self::weighted(points, weights)
    }

    pub fn from_csv_path(path: impl AsRef<Path>, data_dim: Option<usize>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        Self::from_csv_reader(f, data_dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.points().map(<[f64]>::to_vec).collect()
    }

    /// Draw a point index according to the weights.
    pub fn sample_index(&self, rng: &mut RngState) -> usize {
        let u = rng.uniform();
        let i = self.cumulative.partition_point(|&c| c <= u);
        i.min(self.len() - 1)
    }

    pub fn sample(&self, rng: &mut RngState) -> &[f64] {
        self.point(self.sample_index(rng))
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        for (p, w) in self.points().zip(&self.weights) {
            for (mi, pi) in m.iter_mut().zip(p) {
                *mi += w * pi;
            }
        }
        m
    }

    /// Weighted per-coordinate standard deviation, pooled over coordinates.
    pub fn pooled_std(&self) -> f64 {
        let m = self.mean();
        let mut var = 0.0;
        for (p, w) in self.points().zip(&self.weights) {
            var += w * dist_sq(p, &m);
        }
        (var / self.dim as f64).sqrt()
    }

    /// The same charges shifted by `t`.
    pub fn translated(&self, t: &[f64]) -> Result<Self> {
        if t.len() != self.dim {
            return Err(Error::contract("translation has wrong dimension"));
        }
        let points = self
            .points()
            .map(|p| p.iter().zip(t).map(|(a, b)| a + b).collect())
            .collect();
        Self::weighted(points, self.weights.clone())
    }
}

/// Surface area of the unit sphere `S^{n-1}` in `R^n`.
pub fn surface_area(n: usize) -> Result<f64> {
    Ok(ln_surface_area(n)?.exp())
}

pub fn ln_surface_area(n: usize) -> Result<f64> {
    if n == 0 {
        return Err(Error::contract("surface area needs n >= 1"));
    }
    let h = n as f64 / 2.0;
    Ok(std::f64::consts::LN_2 + h * std::f64::consts::PI.ln() - ln_gamma(h))
}

/// A point `(x, r)` of the augmented space, with `r = sigma * sqrt(D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedPoint {
    pub x: Vec<f64>,
    pub sigma: f64,
    pub spec: DimSpec,
}

impl AugmentedPoint {
    pub fn new(x: Vec<f64>, sigma: f64, spec: DimSpec) -> Result<Self> {
        if x.len() != spec.data_dim {
            return Err(Error::contract("augmented point: dimension mismatch"));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::contract(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { x, sigma, spec })
    }
}

/// Field value stored as `exp(log_scale) * (x_scaled, r_scaled)`.
///
/// The raw magnitudes underflow for large `N + D`; ratios and directions
/// only need the scaled components.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldValue {
    pub log_scale: f64,
    pub x_scaled: Vec<f64>,
    pub r_scaled: f64,
}

impl FieldValue {
    pub fn e_x(&self) -> Vec<f64> {
        let s = self.log_scale.exp();
        self.x_scaled.iter().map(|v| v * s).collect()
    }

    pub fn e_r(&self) -> f64 {
        self.r_scaled * self.log_scale.exp()
    }
}

/// The augmented field of the charges at `p` (finite `D` only).
pub fn field_at(charges: &ChargeSet, p: &AugmentedPoint) -> Result<FieldValue> {
    let AuxDim::Finite(d) = p.spec.aux_dim else {
        return Err(Error::Dispatch("the augmented field needs finite D".into()));
    };
    let n = p.spec.data_dim;
    if charges.dim() != n || p.x.len() != n {
        return Err(Error::contract("field: dimension mismatch"));
    }
    let r = p.spec.radius(p.sigma).expect("finite");
    let power = (n as f64 + d as f64) / 2.0;
    let mut logs = Vec::with_capacity(charges.len());
    for (i, y) in charges.points().enumerate() {
        let d2 = dist_sq(&p.x, y) + r * r;
        if d2 == 0.0 {
            return Err(Error::Singularity(format!("query coincides with charge {i} at r = 0")));
        }
        logs.push(charges.log_weights()[i] - power * d2.ln());
    }
    let m = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut x_scaled = vec![0.0; n];
    let mut r_scaled = 0.0;
    for (y, l) in charges.points().zip(&logs) {
        let c = (l - m).exp();
        for (e, (xi, yi)) in x_scaled.iter_mut().zip(p.x.iter().zip(y)) {
            *e += c * (xi - yi);
        }
        r_scaled += c * r;
    }
    Ok(FieldValue {
        log_scale: m - ln_surface_area(n + d as usize)?,
        x_scaled,
        r_scaled,
    })
}

/// Posterior log-weights `l_i` (unnormalized).
fn log_posterior(charges: &ChargeSet, x: &[f64], sigma: f64, spec: &DimSpec, out: &mut Vec<f64>) {
    out.clear();
    match spec.aux_dim {
        AuxDim::Infinite => {
            let inv = 1.0 / (2.0 * sigma * sigma);
            for (y, lw) in charges.points().zip(charges.log_weights()) {
                out.push(lw - dist_sq(x, y) * inv);
            }
        }
        AuxDim::Finite(d) => {
            let r = spec.radius(sigma).expect("finite");
            let r2 = r * r;
            let power = (spec.data_dim as f64 + d as f64) / 2.0;
            for (y, lw) in charges.points().zip(charges.log_weights()) {
                out.push(lw - power * (dist_sq(x, y) + r2).ln());
            }
        }
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for e in v.iter_mut() {
        *e = (*e - m).exp();
        s += *e;
    }
    for e in v.iter_mut() {
        *e /= s;
    }
}

fn check_query(charges: &ChargeSet, x: &[f64], sigma: f64, spec: &DimSpec) -> Result<()> {
    check_sigma(sigma)?;
    if x.len() != spec.data_dim || charges.dim() != spec.data_dim {
        return Err(Error::contract(format!(
            "query of length {} against charges of dimension {} (N = {})",
            x.len(),
            charges.dim(),
            spec.data_dim
        )));
    }
    Ok(())
}

/// Posterior probabilities of each charge given `x` at noise level `sigma`.
pub fn posterior_weights(charges: &ChargeSet, x: &[f64], sigma: f64, spec: &DimSpec) -> Result<Vec<f64>> {
    check_query(charges, x, sigma, spec)?;
    let mut p = Vec::with_capacity(charges.len());
    log_posterior(charges, x, sigma, spec, &mut p);
    softmax_in_place(&mut p);
    Ok(p)
}

/// `E[y | x, sigma]` under the charge set and the perturbation kernel.
pub fn posterior_denoise(charges: &ChargeSet, x: &[f64], sigma: f64, spec: &DimSpec) -> Result<Vec<f64>> {
    let p = posterior_weights(charges, x, sigma, spec)?;
    let mut out = vec![0.0; spec.data_dim];
    for (y, pi) in charges.points().zip(&p) {
        for (o, yi) in out.iter_mut().zip(y) {
            *o += pi * yi;
        }
    }
    Ok(out)
}

/// Gradient of `<posterior_denoise(x), cotangent>` with respect to `x`.
pub fn posterior_denoise_backward(
    charges: &ChargeSet,
    x: &[f64],
    sigma: f64,
    spec: &DimSpec,
    cotangent: &[f64],
) -> Result<Vec<f64>> {
    Ok(posterior_denoise_with_grad(charges, x, sigma, spec, cotangent)?.1)
}

/// Denoised value and input gradient of `<ŷ, cotangent>` in one pass.
pub fn posterior_denoise_with_grad(
    charges: &ChargeSet,
    x: &[f64],
    sigma: f64,
    spec: &DimSpec,
    cotangent: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_query(charges, x, sigma, spec)?;
    if cotangent.len() != spec.data_dim {
        return Err(Error::contract("cotangent has wrong dimension"));
    }
    let n = spec.data_dim;
    let mut p = Vec::with_capacity(charges.len());
    log_posterior(charges, x, sigma, spec, &mut p);
    softmax_in_place(&mut p);
    let mut y_hat = vec![0.0; n];
    let mut proj = Vec::with_capacity(p.len());
    for (y, pi) in charges.points().zip(&p) {
        proj.push(y.iter().zip(cotangent).map(|(a, b)| a * b).sum::<f64>());
        for (o, yi) in y_hat.iter_mut().zip(y) {
            *o += pi * yi;
        }
    }
    let mean_proj: f64 = y_hat.iter().zip(cotangent).map(|(a, b)| a * b).sum();
    // d l_i / dx = -coef_i (x - y_i)
    let (r2, scale) = match spec.aux_dim {
        AuxDim::Infinite => (None, 1.0 / (sigma * sigma)),
        AuxDim::Finite(d) => {
            let r = spec.radius(sigma).expect("finite");
            (Some(r * r), n as f64 + d as f64)
        }
    };
    let mut grad = vec![0.0; n];
    for ((y, pi), pr) in charges.points().zip(&p).zip(&proj) {
        let a = pi * (pr - mean_proj);
        if a == 0.0 {
            continue;
        }
        let coef = match r2 {
            None => scale,
            Some(r2) => scale / (dist_sq(x, y) + r2),
        };
        for (g, (xi, yi)) in grad.iter_mut().zip(x.iter().zip(y)) {
            *g -= a * coef * (xi - yi);
        }
    }
    Ok((y_hat, grad))
}

/// `f = (x - y_hat) / sigma`, the same for finite and infinite `D`.
pub fn normalized_field(y_hat: &[f64], x: &[f64], sigma: f64, spec: &DimSpec) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    if y_hat.len() != spec.data_dim || x.len() != spec.data_dim {
        return Err(Error::contract("normalized field: dimension mismatch"));
    }
    Ok(x.iter().zip(y_hat).map(|(a, b)| (a - b) / sigma).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn two_points() -> ChargeSet {
        ChargeSet::uniform(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap()
    }

    #[test]
    fn surface_areas() {
        assert!((surface_area(2).unwrap() - 2.0 * PI).abs() < 1e-12);
        assert!((surface_area(3).unwrap() - 4.0 * PI).abs() < 1e-12);
        // 2 pi^5 / 4!
        assert!((surface_area(10).unwrap() - 2.0 * PI.powi(5) / 24.0).abs() < 1e-11);
        assert!(matches!(surface_area(0), Err(Error::Contract(_))));
    }

    #[test]
    fn charge_set_validation() {
        assert!(ChargeSet::uniform(vec![]).is_err());
        assert!(ChargeSet::uniform(vec![vec![1.0], vec![1.0, 2.0]]).is_err());
        assert!(ChargeSet::weighted(vec![vec![1.0]], vec![0.0]).is_err());
        let c = ChargeSet::weighted(vec![vec![0.0], vec![1.0]], vec![1.0, 3.0]).unwrap();
        assert_eq!(c.weights(), &[0.25, 0.75]);
    }

    #[test]
    fn csv_with_and_without_weights() {
        let c = ChargeSet::from_csv_reader("x0,x1,weight\n0,0,1\n1,1,3\n".as_bytes(), None).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.weights(), &[0.25, 0.75]);
        let c = ChargeSet::from_csv_reader("0,0,1\n1,1,3\n".as_bytes(), Some(2)).unwrap();
        assert_eq!(c.dim(), 2);
        assert_eq!(c.weights(), &[0.25, 0.75]);
        let c = ChargeSet::from_csv_reader("x0,x1\n0.5,2\n1,1\n".as_bytes(), None).unwrap();
        assert_eq!(c.point(0), &[0.5, 2.0]);
        assert_eq!(c.weights(), &[0.5, 0.5]);
        assert!(ChargeSet::from_csv_reader("1,2\n3\n".as_bytes(), Some(2)).is_err());
        assert!(ChargeSet::from_csv_reader("1,abc\n".as_bytes(), None).is_err());
    }

    #[test]
    fn weighted_sampling_frequencies() {
        let c = ChargeSet::weighted(vec![vec![0.0], vec![1.0]], vec![1.0, 3.0]).unwrap();
        let mut rng = RngState::new(0);
        let n = 40_000;
        let ones = (0..n).filter(|_| c.sample_index(&mut rng) == 1).count();
        let frac = ones as f64 / n as f64;
        assert!((frac - 0.75).abs() < 4.0 * (0.75 * 0.25 / n as f64).sqrt());
    }

    #[test]
    fn field_on_axis_single_charge() {
        let c = ChargeSet::uniform(vec![vec![0.3, -0.2]]).unwrap();
        let spec = DimSpec::finite(2, 3).unwrap();
        let p = AugmentedPoint::new(vec![0.3, -0.2], 0.5, spec).unwrap();
        let f = field_at(&c, &p).unwrap();
        assert!(f.e_x().iter().all(|v| v.abs() == 0.0));
        assert!(f.e_r() > 0.0);
    }

    #[test]
    fn field_mirror_symmetry() {
        let spec = DimSpec::finite(2, 4).unwrap();
        let p = AugmentedPoint::new(vec![0.0, 0.0], 0.7, spec).unwrap();
        let f = field_at(&two_points(), &p).unwrap();
        assert!(f.e_x().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn field_coulomb_two_dimensional() {
        // N = 1, D = 1: E = x~ / (2 pi |x~|^2); at x~ = (1, 1) both components are 1/(4 pi).
        let c = ChargeSet::uniform(vec![vec![0.0]]).unwrap();
        let spec = DimSpec::finite(1, 1).unwrap();
        let p = AugmentedPoint::new(vec![1.0], 1.0, spec).unwrap();
        let f = field_at(&c, &p).unwrap();
        let expected = 1.0 / (4.0 * PI);
        assert!((f.e_x()[0] - expected).abs() < 1e-15);
        assert!((f.e_r() - expected).abs() < 1e-15);
    }

    #[test]
    fn field_singularity_and_dispatch() {
        let c = ChargeSet::uniform(vec![vec![1.0]]).unwrap();
        let spec = DimSpec::finite(1, 2).unwrap();
        let p = AugmentedPoint::new(vec![1.0], 0.0, spec).unwrap();
        assert!(matches!(field_at(&c, &p), Err(Error::Singularity(_))));
        let p = AugmentedPoint::new(vec![1.0], 1.0, DimSpec::infinite(1).unwrap()).unwrap();
        assert!(matches!(field_at(&c, &p), Err(Error::Dispatch(_))));
    }

    #[test]
    fn field_survives_large_d() {
        let c = two_points();
        let spec = DimSpec::finite(2, 5000).unwrap();
        let p = AugmentedPoint::new(vec![0.4, 0.1], 2.0, spec).unwrap();
        let f = field_at(&c, &p).unwrap();
        assert!(f.e_r() == 0.0, "raw magnitude underflows");
        assert!(f.r_scaled > 0.0 && f.log_scale.is_finite());
    }

    #[test]
    fn denoise_single_and_symmetric() {
        let one = ChargeSet::uniform(vec![vec![0.7, -1.1]]).unwrap();
        for aux in [AuxDim::Finite(1), AuxDim::Finite(64), AuxDim::Infinite] {
            let spec = DimSpec::new(2, aux).unwrap();
            for s in [1e-3, 1.0, 50.0] {
                assert_eq!(posterior_denoise(&one, &[3.0, 4.0], s, &spec).unwrap(), vec![0.7, -1.1]);
            }
            let y = posterior_denoise(&two_points(), &[0.0, 0.0], 0.8, &spec).unwrap();
            assert!(y.iter().all(|v| v.abs() < 1e-15));
        }
    }

    #[test]
    fn denoise_handles_collision() {
        let spec = DimSpec::infinite(2).unwrap();
        let y = posterior_denoise(&two_points(), &[1.0, 0.0], 1e-8, &spec).unwrap();
        assert_eq!(y, vec![1.0, 0.0]);
    }

    #[test]
    fn backward_single_charge_is_zero() {
        let one = ChargeSet::uniform(vec![vec![0.7, -1.1]]).unwrap();
        let spec = DimSpec::finite(2, 2).unwrap();
        let g = posterior_denoise_backward(&one, &[0.1, 0.2], 0.5, &spec, &[1.0, -2.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn backward_flat_posterior_limit() {
        // gradient = Cov(y) c / sigma^2 -> 0
        let c = ChargeSet::uniform(vec![vec![0.5, 0.0], vec![-0.25, 0.5], vec![0.1, -0.4]]).unwrap();
        let spec = DimSpec::infinite(2).unwrap();
        let g = posterior_denoise_backward(&c, &[0.2, 0.1], 1e3, &spec, &[1.0, 1.0]).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-6));
    }

    #[test]
    fn normalized_field_basics() {
        let spec = DimSpec::infinite(2).unwrap();
        assert_eq!(normalized_field(&[1.0, 2.0], &[1.0, 2.0], 0.3, &spec).unwrap(), vec![0.0, 0.0]);
        assert_eq!(normalized_field(&[0.0, 0.0], &[1.0, 0.0], 1.0, &spec).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(normalized_field(&[0.0], &[0.0], 0.0, &DimSpec::infinite(1).unwrap()), Err(Error::Contract(_))));
    }

    #[test]
    fn translation_equivariance_exact_for_integer_shift() {
        let c = ChargeSet::uniform(vec![vec![0.5, 0.25], vec![-1.0, 2.0]]).unwrap();
        let shifted = c.translated(&[4.0, -2.0]).unwrap();
        let spec = DimSpec::finite(2, 8).unwrap();
        let a = posterior_denoise(&c, &[0.25, 0.5], 0.75, &spec).unwrap();
        let b = posterior_denoise(&shifted, &[4.25, -1.5], 0.75, &spec).unwrap();
        assert!((b[0] - a[0] - 4.0).abs() < 1e-14);
        assert!((b[1] - a[1] + 2.0).abs() < 1e-14);
    }
}

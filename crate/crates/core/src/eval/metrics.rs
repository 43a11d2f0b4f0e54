//! Two-sample metrics on point clouds.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sample_unit_sphere, RngState};

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("metric needs two nonempty sample sets"));
    }
    let d = a[0].len();
    if a.iter().chain(b).any(|p| p.len() != d) {
        return Err(Error::contract("sample sets disagree in dimension"));
    }
    Ok(d)
}

/// Column-major copy for vectorizable distance rows.
fn columns(a: &[Vec<f64>], d: usize) -> Vec<Vec<f64>> {
    (0..d).map(|k| a.iter().map(|p| p[k]).collect()).collect()
}

/// `sum_j |p - b_j|` over `b[..len]`, with `buf` as scratch.
fn row_sum(p: &[f64], b: &[Vec<f64>], len: usize, buf: &mut [f64]) -> f64 {
    let buf = &mut buf[..len];
    buf.fill(0.0);
    for (pk, col) in p.iter().zip(b) {
        for (acc, v) in buf.iter_mut().zip(&col[..len]) {
            let t = pk - v;
            *acc += t * t;
        }
    }
    // independent lanes let the square roots vectorize
    let mut lanes = [0.0; 8];
    let mut chunks = buf.chunks_exact(8);
    for c in &mut chunks {
        for (l, v) in lanes.iter_mut().zip(c) {
            *l += v.sqrt();
        }
    }
    lanes.iter().sum::<f64>() + chunks.remainder().iter().map(|v| v.sqrt()).sum::<f64>()
}

fn pair_sum(a: &[Vec<f64>], b: &[Vec<f64>], d: usize) -> f64 {
    let cols = columns(b, d);
    let mut buf = vec![0.0; b.len()];
    a.iter().map(|p| row_sum(p, &cols, b.len(), &mut buf)).sum()
}

/// `sum_{i,j} |a_i - a_j|` using symmetry.
fn self_pair_sum(a: &[Vec<f64>], d: usize) -> f64 {
    let cols = columns(a, d);
    let mut buf = vec![0.0; a.len()];
    2.0 * a
        .iter()
        .enumerate()
        .map(|(i, p)| row_sum(p, &cols, i, &mut buf))
        .sum::<f64>()
}

fn sorted(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut v = a.to_vec();
    v.sort_by(|x, y| {
        x.iter()
            .zip(y)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    v
}

/// Energy distance `2 E|a - b| - E|a - a'| - E|b - b'|` (V-statistic).
///
/// The V-statistic is a squared MMD and so nonnegative; equal multisets give
/// exactly zero.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = check_sets(a, b)?;
    if a.len() == b.len() && sorted(a) == sorted(b) {
        return Ok(0.0);
    }
    let (n, m) = (a.len() as f64, b.len() as f64);
    let ab = pair_sum(a, b, d) / (n * m);
    let aa = self_pair_sum(a, d) / (n * n);
    let bb = self_pair_sum(b, d) / (m * m);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// Unbiased (U-statistic) energy distance; may be slightly negative.
pub fn energy_distance_unbiased(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let d = check_sets(a, b)?;
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::contract("unbiased energy distance needs two points per set"));
    }
    let (n, m) = (a.len() as f64, b.len() as f64);
    let ab = pair_sum(a, b, d) / (n * m);
    let aa = self_pair_sum(a, d) / (n * (n - 1.0));
    let bb = self_pair_sum(b, d) / (m * (m - 1.0));
    Ok(2.0 * ab - aa - bb)
}

/// Squared 2-Wasserstein distance between two 1-D empirical laws via quantiles.
pub fn w2_squared_1d(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    if n == m {
        return a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
    }
    // merge the quantile breakpoints i/n and j/m
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < n && j < m {
        let ua = (i + 1) as f64 / n as f64;
        let ub = (j + 1) as f64 / m as f64;
        let next = ua.min(ub);
        acc += (next - u) * (a[i] - b[j]).powi(2);
        u = next;
        if ua <= next {
            i += 1;
        }
        if ub <= next {
            j += 1;
        }
    }
    acc
}

/// Mean over random unit directions of the squared 1-D W2 of the projections.
pub fn sliced_w2(a: &[Vec<f64>], b: &[Vec<f64>], n_projections: usize, rng: &mut RngState) -> Result<f64> {
    let d = check_sets(a, b)?;
    if n_projections == 0 {
        return Err(Error::config("sliced W2 needs at least one projection"));
    }
    let mut total = 0.0;
    for _ in 0..n_projections {
        let u = sample_unit_sphere(d, rng)?;
        let proj = |s: &[Vec<f64>]| -> Vec<f64> {
            s.iter().map(|p| p.iter().zip(&u).map(|(x, y)| x * y).sum()).collect()
        };
        total += w2_squared_1d(&mut proj(a), &mut proj(b));
    }
    Ok(total / n_projections as f64)
}

pub fn sample_mean(a: &[Vec<f64>]) -> Vec<f64> {
    let d = a.first().map_or(0, Vec::len);
    let mut m = vec![0.0; d];
    for p in a {
        for (mi, v) in m.iter_mut().zip(p) {
            *mi += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= a.len() as f64);
    m
}

pub fn sample_covariance(a: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let m = sample_mean(a);
    let d = m.len();
    let mut c = vec![vec![0.0; d]; d];
    for p in a {
        for i in 0..d {
            for j in 0..d {
                c[i][j] += (p[i] - m[i]) * (p[j] - m[j]);
            }
        }
    }
    let denom = (a.len().max(2) - 1) as f64;
    c.iter_mut().flatten().for_each(|v| *v /= denom);
    c
}

/// Kolmogorov-Smirnov statistic of `samples` against a continuous CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_two_sample(a: &mut [f64], b: &mut [f64]) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < n && j < m {
        let x = a[i].min(b[j]);
        while i < n && a[i] <= x {
            i += 1;
        }
        while j < m && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / n as f64 - j as f64 / m as f64).abs());
    }
    d
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub energy_distance: f64,
    pub sliced_w2: f64,
    /// `|mean_a - mean_b|` per coordinate.
    pub mean_gap: Vec<f64>,
    /// `|cov_a - cov_b|` entrywise, row-major.
    pub cov_gap: Vec<Vec<f64>>,
    pub sample_count: usize,
}

/// Compare `generated` with `reference`.
pub fn metric_report(
    generated: &[Vec<f64>],
    reference: &[Vec<f64>],
    n_projections: usize,
    rng: &mut RngState,
) -> Result<MetricReport> {
    check_sets(generated, reference)?;
    let ma = sample_mean(generated);
    let mb = sample_mean(reference);
    let ca = sample_covariance(generated);
    let cb = sample_covariance(reference);
    Ok(MetricReport {
        energy_distance: energy_distance(generated, reference)?,
        sliced_w2: sliced_w2(generated, reference, n_projections, rng)?,
        mean_gap: ma.iter().zip(&mb).map(|(a, b)| (a - b).abs()).collect(),
        cov_gap: ca
            .iter()
            .zip(&cb)
            .map(|(r, s)| r.iter().zip(s).map(|(a, b)| (a - b).abs()).collect())
            .collect(),
        sample_count: generated.len(),
    })
}

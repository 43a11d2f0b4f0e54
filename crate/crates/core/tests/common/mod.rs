//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::f64::consts::FRAC_PI_2;

/// CDF of the perturbation radius from direct quadrature of its density.
///
/// With `ρ = r tan θ` the density `ρ^{N-1} (ρ² + r²)^{-(N+D)/2}` becomes
/// `sin^{N-1} θ cos^{D-1} θ` on `[0, π/2)`, which is tabulated with the
/// trapezoid rule and interpolated.
pub struct RadiusCdf {
    r: f64,
    h: f64,
    table: Vec<f64>,
}

impl RadiusCdf {
    pub fn new(n: usize, d: u64, r: f64) -> Self {
        let steps = 200_000;
        let h = FRAC_PI_2 / steps as f64;
        let f = |t: f64| {
            let s = t.sin().powi(n as i32 - 1);
            let c = t.cos();
            // ln keeps cos^{D-1} finite for large D
            if c <= 0.0 {
                if d == 1 {
                    s
                } else {
                    0.0
                }
            } else {
                s * ((d as f64 - 1.0) * c.ln()).exp()
            }
        };
        let mut table = vec![0.0; steps + 1];
        let mut prev = f(0.0);
        for i in 1..=steps {
            let cur = f(i as f64 * h);
            table[i] = table[i - 1] + 0.5 * h * (prev + cur);
            prev = cur;
        }
        let total = table[steps];
        table.iter_mut().for_each(|v| *v /= total);
        Self { r, h, table }
    }

    pub fn cdf(&self, rho: f64) -> f64 {
        let t = (rho / self.r).atan() / self.h;
        let i = (t.floor() as usize).min(self.table.len() - 2);
        let frac = t - i as f64;
        self.table[i] * (1.0 - frac) + self.table[i + 1] * frac
    }
}

/// Maximum gap between the empirical CDF of `samples` and `cdf`.
pub fn ks(mut samples: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
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

/// Lower regularized incomplete gamma `P(a, x)` by its power series.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut k = 1.0;
    while term.abs() > 1e-17 * sum.abs() && k < 10_000.0 {
        term *= x / (a + k);
        sum += term;
        k += 1.0;
    }
    (a * x.ln() - x - ln_gamma(a)).exp() * sum
}

/// Lanczos approximation of `ln Γ(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = G[0];
    let t = x + 7.5;
    for (i, g) in G.iter().enumerate().skip(1) {
        a += g / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// `∫_a^b f` by the composite trapezoid rule on `n` intervals.
pub fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = 0.5 * (f(a) + f(b));
    for i in 1..n {
        s += f(a + i as f64 * h);
    }
    s * h
}

/// Central-difference gradient of `f` at `p` with step `h`.
pub fn fd_gradient(mut f: impl FnMut(&[f64]) -> f64, p: &[f64], h: f64) -> Vec<f64> {
    let mut q = p.to_vec();
    (0..p.len())
        .map(|i| {
            let v = q[i];
            q[i] = v + h;
            let up = f(&q);
            q[i] = v - h;
            let dn = f(&q);
            q[i] = v;
            (up - dn) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max(max |a|, max |b|)`.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let den = a.iter().chain(b).map(|x| x.abs()).fold(0.0, f64::max);
    num / den.max(1e-300)
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

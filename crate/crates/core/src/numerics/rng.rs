//! Seeded, splittable randomness.
//!
//! Every draw in the library goes through [`RngState`]: a ChaCha20 keystream
//! keyed by a 64-bit master seed, with the 64-bit ChaCha stream id selecting
//! an independent sub-sequence. The position inside a stream is the ChaCha
//! word counter, so `(master_seed, stream_id, counter)` pins every draw.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct RngState {
    master_seed: u64,
    inner: ChaCha20Rng,
}

impl RngState {
    /// Stream 0 of `master_seed`.
    pub fn new(master_seed: u64) -> Self {
        Self::with_stream(master_seed, 0)
    }

    pub fn with_stream(master_seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(master_seed);
        inner.set_stream(stream_id);
        Self { master_seed, inner }
    }

    /// Restore an exact position: `counter` is the 32-bit word offset in the stream.
    pub fn at(master_seed: u64, stream_id: u64, counter: u64) -> Self {
        let mut rng = Self::with_stream(master_seed, stream_id);
        rng.inner.set_word_pos(counter as u128);
        rng
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.inner.get_stream()
    }

    pub fn counter(&self) -> u64 {
        self.inner.get_word_pos() as u64
    }

    /// A fresh stream of the same master seed, addressed by `tag` relative to this stream.
    ///
    /// Does not advance `self`; calling it twice with the same tag yields the same stream.
    pub fn derive(&self, tag: u64) -> RngState {
        let id = splitmix64(self.stream_id() ^ splitmix64(tag.wrapping_add(0x632b_e59b_d9b4_e019)));
        Self::with_stream(self.master_seed, id)
    }

    /// Draw a child stream, advancing `self`.
    pub fn split(&mut self) -> RngState {
        let tag = self.inner.next_u64();
        self.derive(tag)
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Uniform direction on the unit sphere S^{n-1}, by normalizing a standard Gaussian vector.
pub fn sample_unit_sphere(n: usize, rng: &mut RngState) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::config("unit sphere needs dimension >= 1"));
    }
    loop {
        let mut u = rng.normal_vec(n);
        let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 && norm.is_finite() {
            u.iter_mut().for_each(|v| *v /= norm);
            return Ok(u);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    #[test]
    fn same_triple_same_draws() {
        let mut a = RngState::with_stream(11, 3);
        let mut b = RngState::with_stream(11, 3);
        for _ in 0..5 {
            a.uniform();
        }
        let pos = a.counter();
        let mut c = RngState::at(11, 3, pos);
        for _ in 0..5 {
            b.uniform();
        }
        for _ in 0..100 {
            let x = a.uniform();
            assert_eq!(x.to_bits(), b.uniform().to_bits());
            assert_eq!(x.to_bits(), c.uniform().to_bits());
        }
    }

    #[test]
    fn derive_is_pure() {
        let base = RngState::new(5);
        let mut a = base.derive(9);
        let mut b = base.derive(9);
        assert_eq!(a.next_u64(), b.next_u64());
        assert_ne!(base.derive(9).stream_id(), base.derive(10).stream_id());
    }

    #[test]
    fn distinct_streams_uncorrelated() {
        let n = 100_000;
        let mut a = RngState::with_stream(42, 1);
        let mut b = RngState::with_stream(42, 2);
        let xs: Vec<f64> = (0..n).map(|_| a.uniform()).collect();
        let ys: Vec<f64> = (0..n).map(|_| b.uniform()).collect();
        let mx = xs.iter().sum::<f64>() / n as f64;
        let my = ys.iter().sum::<f64>() / n as f64;
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for (x, y) in xs.iter().zip(&ys) {
            sxy += (x - mx) * (y - my);
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
        }
        let corr = sxy / (sxx * syy).sqrt();
        assert!(corr.abs() < 0.02, "corr {corr}");
    }

    #[test]
    fn sphere_rejects_zero_dim() {
        let mut rng = RngState::new(0);
        assert!(matches!(sample_unit_sphere(0, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn sphere_draws_have_unit_norm() {
        let mut rng = RngState::new(1);
        for n in 1..8 {
            for _ in 0..200 {
                let v = sample_unit_sphere(n, &mut rng).unwrap();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_dim_sphere_is_fair_coin() {
        let mut rng = RngState::new(2);
        let n = 10_000;
        let plus = (0..n)
            .filter(|_| sample_unit_sphere(1, &mut rng).unwrap()[0] > 0.0)
            .count();
        // two-sided normal approximation to the binomial test
        let z = (plus as f64 - n as f64 * 0.5) / (n as f64 * 0.25).sqrt();
        let p = statrs::function::erf::erfc(z.abs() / std::f64::consts::SQRT_2);
        assert!(p > 0.01, "plus={plus} p={p}");
    }

    #[test]
    fn circle_angles_uniform() {
        let mut rng = RngState::new(3);
        let n = 100_000;
        let bins = 36;
        let mut counts = vec![0usize; bins];
        for _ in 0..n {
            let v = sample_unit_sphere(2, &mut rng).unwrap();
            let a = v[1].atan2(v[0]).rem_euclid(std::f64::consts::TAU);
            counts[((a / std::f64::consts::TAU) * bins as f64) as usize % bins] += 1;
        }
        let expected = n as f64 / bins as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "chi2={chi2} p={p}");
    }
}

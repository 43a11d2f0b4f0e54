//! Preconditioned network denoiser `(x, sigma) -> y_hat`.
//!
//! The raw MLP `F` is wrapped as
//!
//! ```text
//! y_hat = mu + c_skip * (x - mu) + c_out * F(c_in * (x - mu), sigma)
//! ```
//!
//! For `D = ∞` the coefficients are the usual functions of `sigma` and the
//! data scale `sigma_data`. For finite `D` the kernel is a Gaussian scale
//! mixture, `x - y | s ~ N(0, s^2 I)` with `s^2 = sigma^2 D / g`, `g ~ chi^2_D`.
//! The coefficients are then averaged over the posterior of the scale given
//! `q = |x - mu|^2`, using `K` quantile nodes of `g`. This keeps the network
//! input and target at unit scale even far out in the heavy tails.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView2};
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::kernel::{check_sigma, AuxDim, DimSpec};
use crate::numerics::{read_u32, read_u64, Activation, ForwardTrace, Mlp, RngState};

const MIXTURE_NODES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preconditioning {
    /// Gaussian-kernel coefficients regardless of `D`.
    Gaussian,
    /// Scale-mixture coefficients for finite `D`, Gaussian for `D = ∞`.
    Auto,
}

impl Preconditioning {
    fn code(self) -> u32 {
        match self {
            Preconditioning::Gaussian => 0,
            Preconditioning::Auto => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Preconditioning::Gaussian),
            1 => Ok(Preconditioning::Auto),
            _ => Err(Error::Parse(format!("unknown preconditioning code {c}"))),
        }
    }
}

/// Quantile nodes `g_k / D` of `chi^2_D / D` at the midpoints `(k + 1/2) / K`.
fn mixture_nodes(d: u64) -> Vec<f64> {
    let k = MIXTURE_NODES;
    let df = d as f64;
    if d <= 4096 {
        let chi = ChiSquared::new(df).expect("positive dof");
        (0..k)
            .map(|i| chi.inverse_cdf((i as f64 + 0.5) / k as f64) / df)
            .collect()
    } else {
        // Wilson-Hilferty cube-root normal approximation
        let z = Normal::standard();
        let a = 2.0 / (9.0 * df);
        (0..k)
            .map(|i| {
                let zq = z.inverse_cdf((i as f64 + 0.5) / k as f64);
                (1.0 - a + zq * a.sqrt()).powi(3)
            })
            .collect()
    }
}

/// Coefficients and their derivatives with respect to `q = |x - mu|^2`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Coefficients {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub dc_skip: f64,
    pub dc_out: f64,
    pub dc_in: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    net: Mlp,
    spec: DimSpec,
    sigma_data: f64,
    mean: Vec<f64>,
    precond: Preconditioning,
    nodes: Option<Vec<f64>>,
}

/// Intermediates of a batched forward pass.
#[derive(Clone, Debug)]
pub struct DenoiserTrace {
    centered: Vec<Vec<f64>>,
    coefs: Vec<Coefficients>,
    raw: ForwardTrace,
    outputs: Vec<Vec<f64>>,
}

impl DenoiserTrace {
    pub fn outputs(&self) -> &[Vec<f64>] {
        &self.outputs
    }

    pub fn into_outputs(self) -> Vec<Vec<f64>> {
        self.outputs
    }
}

impl Denoiser {
    pub fn new(
        net: Mlp,
        spec: DimSpec,
        sigma_data: f64,
        mean: Vec<f64>,
        precond: Preconditioning,
    ) -> Result<Self> {
        let n = spec.data_dim;
        if net.input_dim() != n || net.output_dim() != n {
            return Err(Error::config(format!(
                "network maps {} -> {} but the data dimension is {n}",
                net.input_dim(),
                net.output_dim()
            )));
        }
        if !(sigma_data > 0.0 && sigma_data.is_finite()) {
            return Err(Error::config(format!("sigma_data must be positive, got {sigma_data}")));
        }
        if mean.len() != n {
            return Err(Error::config("mean has wrong dimension"));
        }
        let nodes = match (precond, spec.aux_dim) {
            (Preconditioning::Auto, AuxDim::Finite(d)) => Some(mixture_nodes(d)),
            _ => None,
        };
        Ok(Self {
            net,
            spec,
            sigma_data,
            mean,
            precond,
            nodes,
        })
    }

    /// Fresh network with hidden `widths` between input and output of size `N`.
    pub fn init(
        spec: DimSpec,
        hidden: &[usize],
        activation: Activation,
        sigma_data: f64,
        mean: Vec<f64>,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut widths = vec![spec.data_dim];
        widths.extend_from_slice(hidden);
        widths.push(spec.data_dim);
        let net = Mlp::new(&widths, 4, activation, rng)?;
        Self::new(net, spec, sigma_data, mean, Preconditioning::Auto)
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn spec(&self) -> &DimSpec {
        &self.spec
    }

    pub fn sigma_data(&self) -> f64 {
        self.sigma_data
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn preconditioning(&self) -> Preconditioning {
        self.precond
    }

    pub fn params(&self) -> &[f64] {
        self.net.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.net.params_mut()
    }

    pub fn param_count(&self) -> usize {
        self.net.param_count()
    }

    pub fn coefficients(&self, q: f64, sigma: f64) -> Coefficients {
        let sd2 = self.sigma_data * self.sigma_data;
        let Some(nodes) = &self.nodes else {
            let v = sigma * sigma + sd2;
            return Coefficients {
                c_skip: sd2 / v,
                c_out: sigma * self.sigma_data / v.sqrt(),
                c_in: 1.0 / v.sqrt(),
                ..Default::default()
            };
        };
        let half_n = self.spec.data_dim as f64 / 2.0;
        let k = nodes.len();
        let mut lw = [0.0; MIXTURE_NODES];
        let mut vs = [0.0; MIXTURE_NODES];
        let mut s2s = [0.0; MIXTURE_NODES];
        let mut m = f64::NEG_INFINITY;
        for i in 0..k {
            let s2 = sigma * sigma / nodes[i];
            let v = sd2 + s2;
            s2s[i] = s2;
            vs[i] = v;
            lw[i] = -half_n * v.ln() - q / (2.0 * v);
            m = m.max(lw[i]);
        }
        let mut z = 0.0;
        for l in lw.iter_mut().take(k) {
            *l = (*l - m).exp();
            z += *l;
        }
        // expectations and their q-derivatives; dw_k/dq = w_k (a_k - a_bar), a_k = -1/(2 v_k)
        let mut a_bar = 0.0;
        for i in 0..k {
            lw[i] /= z;
            a_bar += lw[i] * (-0.5 / vs[i]);
        }
        let (mut e_skip, mut e_out, mut e_v) = (0.0, 0.0, 0.0);
        let (mut d_skip, mut d_out, mut d_v) = (0.0, 0.0, 0.0);
        for i in 0..k {
            let w = lw[i];
            let da = -0.5 / vs[i] - a_bar;
            let fs = sd2 / vs[i];
            let fo = sd2 * s2s[i] / vs[i];
            e_skip += w * fs;
            e_out += w * fo;
            e_v += w * vs[i];
            d_skip += w * fs * da;
            d_out += w * fo * da;
            d_v += w * vs[i] * da;
        }
        let c_out = e_out.sqrt();
        let c_in = 1.0 / e_v.sqrt();
        Coefficients {
            c_skip: e_skip,
            c_out,
            c_in,
            dc_skip: d_skip,
            dc_out: d_out / (2.0 * c_out),
            dc_in: -0.5 * c_in * c_in * c_in * d_v,
        }
    }

    pub fn forward_trace(&self, xs: &[Vec<f64>], sigmas: &[f64]) -> Result<DenoiserTrace> {
        let n = self.spec.data_dim;
        if xs.len() != sigmas.len() {
            return Err(Error::contract(format!("{} inputs but {} sigmas", xs.len(), sigmas.len())));
        }
        let b = xs.len();
        let mut centered = Vec::with_capacity(b);
        let mut coefs = Vec::with_capacity(b);
        let mut scaled = Array2::zeros((b, n));
        for (i, (x, &sigma)) in xs.iter().zip(sigmas).enumerate() {
            if x.len() != n {
                return Err(Error::contract(format!("input of length {} for N = {n}", x.len())));
            }
            check_sigma(sigma)?;
            let d: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
            let q = d.iter().map(|v| v * v).sum();
            let c = self.coefficients(q, sigma);
            for (j, v) in d.iter().enumerate() {
                scaled[[i, j]] = c.c_in * v;
            }
            centered.push(d);
            coefs.push(c);
        }
        let raw = self.net.forward_trace(scaled.view(), sigmas)?;
        let outputs = (0..b)
            .map(|i| {
                let c = coefs[i];
                (0..n)
                    .map(|j| self.mean[j] + c.c_skip * centered[i][j] + c.c_out * raw.output()[[i, j]])
                    .collect()
            })
            .collect();
        Ok(DenoiserTrace {
            centered,
            coefs,
            raw,
            outputs,
        })
    }

    pub fn forward_batch(&self, xs: &[Vec<f64>], sigmas: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_trace(xs, sigmas)?.into_outputs())
    }

    pub fn forward(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let mut out = self.forward_batch(&[x.to_vec()], &[sigma])?;
        Ok(out.pop().expect("one row"))
    }

    /// Reverse mode for `sum_b <y_hat_b, cotangent_b>`.
    ///
    /// Parameter gradients are accumulated into `param_grad` when given; the
    /// input gradients are returned per row.
    pub fn backward(
        &self,
        trace: &DenoiserTrace,
        cotangents: &[Vec<f64>],
        param_grad: Option<&mut [f64]>,
    ) -> Result<Vec<Vec<f64>>> {
        let n = self.spec.data_dim;
        let b = trace.outputs.len();
        if cotangents.len() != b || cotangents.iter().any(|c| c.len() != n) {
            return Err(Error::contract("cotangent batch does not match the forward pass"));
        }
        let mut raw_cot = Array2::zeros((b, n));
        for (i, c) in cotangents.iter().enumerate() {
            for j in 0..n {
                raw_cot[[i, j]] = trace.coefs[i].c_out * c[j];
            }
        }
        let mut scratch;
        let grad = match param_grad {
            Some(g) => g,
            None => {
                scratch = vec![0.0; self.net.param_count()];
                &mut scratch[..]
            }
        };
        let g_u = self.net.backward_into(&trace.raw, raw_cot.view(), grad)?;
        Ok(self.input_grads(trace, cotangents, g_u.view()))
    }

    fn input_grads(&self, trace: &DenoiserTrace, cot: &[Vec<f64>], g_u: ArrayView2<f64>) -> Vec<Vec<f64>> {
        let n = self.spec.data_dim;
        (0..cot.len())
            .map(|i| {
                let c = trace.coefs[i];
                let d = &trace.centered[i];
                let dc = |a: &[f64]| a.iter().zip(d).map(|(x, y)| x * y).sum::<f64>();
                let d_dot_c = dc(&cot[i]);
                let raw = trace.raw.output().row(i);
                let f_dot_c: f64 = raw.iter().zip(&cot[i]).map(|(a, b)| a * b).sum();
                let gu: Vec<f64> = g_u.row(i).to_vec();
                let d_dot_gu = dc(&gu);
                let radial = 2.0 * (c.dc_skip * d_dot_c + c.dc_out * f_dot_c + c.dc_in * d_dot_gu);
                (0..n)
                    .map(|j| c.c_skip * cot[i][j] + c.c_in * gu[j] + radial * d[j])
                    .collect()
            })
            .collect()
    }

    const MAGIC: &'static [u8; 8] = b"IPFMDEN1";

    /// Checkpoint: magic, u32 N, u64 D (0 for infinity), f64 sigma_data,
    /// N f64 mean, u32 preconditioning code, then the network checkpoint.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.spec.data_dim as u32).to_le_bytes())?;
        w.write_all(&self.spec.aux_dim.finite().unwrap_or(0).to_le_bytes())?;
        w.write_all(&self.sigma_data.to_le_bytes())?;
        for m in &self.mean {
            w.write_all(&m.to_le_bytes())?;
        }
        w.write_all(&self.precond.code().to_le_bytes())?;
        self.net.write_to(w)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Parse("not a denoiser checkpoint".into()));
        }
        let n = read_u32(&mut r)? as usize;
        let d = read_u64(&mut r)?;
        let aux = if d == 0 { AuxDim::Infinite } else { AuxDim::Finite(d) };
        let spec = DimSpec::new(n, aux).map_err(|e| Error::Parse(e.to_string()))?;
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf)?;
        let sigma_data = f64::from_le_bytes(buf);
        let mut mean = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            mean.push(f64::from_le_bytes(buf));
        }
        let precond = Preconditioning::from_code(read_u32(&mut r)?)?;
        let net = Mlp::read_from(r)?;
        Self::new(net, spec, sigma_data, mean, precond).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        crate::io::write_atomic(path.as_ref(), &buf)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn make(aux: AuxDim, seed: u64) -> Denoiser {
        let spec = DimSpec::new(2, aux).unwrap();
        let mut rng = RngState::new(seed);
        Denoiser::init(spec, &[8, 8], Activation::Silu, 1.3, vec![0.2, -0.1], &mut rng).unwrap()
    }

    #[test]
    fn gaussian_coefficients() {
        let d = make(AuxDim::Infinite, 0);
        let c = d.coefficients(5.0, 0.5);
        let v: f64 = 0.25 + 1.69;
        assert!((c.c_skip - 1.69 / v).abs() < 1e-15);
        assert!((c.c_out - 0.5 * 1.3 / v.sqrt()).abs() < 1e-15);
        assert!((c.c_in - 1.0 / v.sqrt()).abs() < 1e-15);
        assert_eq!(c.dc_skip, 0.0);
    }

    #[test]
    fn mixture_tends_to_gaussian_for_large_d() {
        let g = make(AuxDim::Infinite, 0).coefficients(3.0, 0.8);
        let m = make(AuxDim::Finite(1_000_000), 0).coefficients(3.0, 0.8);
        assert!((g.c_skip - m.c_skip).abs() < 1e-3);
        assert!((g.c_out - m.c_out).abs() < 1e-3);
        assert!((g.c_in - m.c_in).abs() < 1e-3);
    }

    #[test]
    fn mixture_derivatives_match_differences() {
        let d = make(AuxDim::Finite(2), 0);
        for (q, sigma) in [(0.3, 0.5), (40.0, 2.0), (2.0, 0.05)] {
            let h = 1e-6 * (1.0 + q);
            let a = d.coefficients(q + h, sigma);
            let b = d.coefficients(q - h, sigma);
            let c = d.coefficients(q, sigma);
            let fd = |x: f64, y: f64| (x - y) / (2.0 * h);
            assert!((fd(a.c_skip, b.c_skip) - c.dc_skip).abs() < 1e-6 * (1.0 + c.dc_skip.abs()));
            assert!((fd(a.c_out, b.c_out) - c.dc_out).abs() < 1e-6 * (1.0 + c.dc_out.abs()));
            assert!((fd(a.c_in, b.c_in) - c.dc_in).abs() < 1e-6 * (1.0 + c.dc_in.abs()));
        }
    }

    #[test]
    fn input_gradient_matches_differences() {
        for aux in [AuxDim::Infinite, AuxDim::Finite(2), AuxDim::Finite(16)] {
            let den = make(aux, 3);
            let x = vec![1.7, -0.4];
            let sigma = 0.9;
            let cot = vec![0.3, -1.1];
            let trace = den.forward_trace(&[x.clone()], &[sigma]).unwrap();
            let g = den.backward(&trace, &[cot.clone()], None).unwrap().pop().unwrap();
            for j in 0..2 {
                let h = 1e-6;
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[j] += h;
                xm[j] -= h;
                let f = |x: &[f64]| -> f64 {
                    den.forward(x, sigma).unwrap().iter().zip(&cot).map(|(a, b)| a * b).sum()
                };
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                assert!((fd - g[j]).abs() < 1e-6 * (1.0 + fd.abs()), "{aux:?} {fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let den = make(AuxDim::Finite(16), 4);
        let mut buf = Vec::new();
        den.write_to(&mut buf).unwrap();
        let back = Denoiser::read_from(&buf[..]).unwrap();
        assert_eq!(back, den);
        assert!(Denoiser::read_from(&buf[..10]).is_err());
    }

    #[test]
    fn rejects_mismatched_network() {
        let spec = DimSpec::infinite(3).unwrap();
        let net = Mlp::zeros(&[2, 4, 2], 4, Activation::Tanh).unwrap();
        assert!(matches!(
            Denoiser::new(net, spec, 1.0, vec![0.0; 3], Preconditioning::Auto),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_network_is_skip_path() {
        let spec = DimSpec::infinite(2).unwrap();
        let net = Mlp::zeros(&[2, 4, 2], 4, Activation::Tanh).unwrap();
        let den = Denoiser::new(net, spec, 1.0, vec![0.0, 0.0], Preconditioning::Auto).unwrap();
        let y = den.forward(&[2.0, -2.0], 1.0).unwrap();
        assert_eq!(y, vec![1.0, -1.0]);
    }
}

//! Fully connected network with a fixed noise-level embedding and hand-written
//! reverse mode.
//!
//! Parameters live in one flat `Vec<f64>`. Layer `l` stores its weight matrix
//! row-major as `fan_in x fan_out`, followed by `fan_out` biases. The first
//! layer's fan-in is `widths[0] + conditioning_dim`: the embedding of `sigma`
//! is appended to the data input.

use std::io::{Read, Write};

use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use super::rng::RngState;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// x * sigmoid(x), a smooth GELU-like unit.
    Silu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Silu => {
                let sig = 1.0 / (1.0 + (-z).exp());
                sig * (1.0 + z * (1.0 - sig))
            }
        }
    }

    fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Silu => 1,
        }
    }

    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(Activation::Tanh),
            1 => Ok(Activation::Silu),
            other => Err(Error::Parse(format!("unknown activation code {other}"))),
        }
    }
}

/// Noise-level embedding appended to the network input.
///
/// With four components this is `[ln(sigma)/4, sin(ln sigma), cos(ln sigma), 1]`;
/// every component stays O(1) for sigma in [0.002, 80]. Other sizes keep the
/// scaled log first and the constant last, with sin/cos pairs of increasing
/// frequency in between.
pub fn sigma_embedding(sigma: f64, dim: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), dim);
    if dim == 0 {
        return;
    }
    let l = sigma.ln();
    out[0] = l / 4.0;
    if dim == 1 {
        return;
    }
    out[dim - 1] = 1.0;
    for (k, slot) in out[1..dim - 1].iter_mut().enumerate() {
        let freq = (k / 2 + 1) as f64;
        *slot = if k % 2 == 0 { (freq * l).sin() } else { (freq * l).cos() };
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    conditioning_dim: usize,
    activation: Activation,
    params: Vec<f64>,
}

/// Intermediate values of a batched forward pass, consumed by [`Mlp::backward_batch`].
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    /// Input to each layer (post-activation of the previous one); `inputs[0]` includes the embedding.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of each hidden layer.
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn into_output(self) -> Array2<f64> {
        self.output
    }
}

fn layer_shapes(widths: &[usize], conditioning_dim: usize) -> Vec<(usize, usize)> {
    widths
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let fan_in = if i == 0 { w[0] + conditioning_dim } else { w[0] };
            (fan_in, w[1])
        })
        .collect()
}

impl Mlp {
    /// Weights ~ N(0, 1/fan_in), biases zero.
    pub fn new(
        widths: &[usize],
        conditioning_dim: usize,
        activation: Activation,
        rng: &mut RngState,
    ) -> Result<Self> {
        let mut net = Self::zeros(widths, conditioning_dim, activation)?;
        let mut offset = 0;
        for (fan_in, fan_out) in layer_shapes(widths, conditioning_dim) {
            let scale = (1.0 / fan_in as f64).sqrt();
            for w in &mut net.params[offset..offset + fan_in * fan_out] {
                *w = scale * rng.normal();
            }
            offset += (fan_in + 1) * fan_out;
        }
        Ok(net)
    }

    pub fn zeros(widths: &[usize], conditioning_dim: usize, activation: Activation) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::config(format!(
                "an MLP needs at least an input and an output width, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::config(format!("widths must be positive, got {widths:?}")));
        }
        if conditioning_dim == 0 {
            return Err(Error::config("conditioning_dim must be >= 1"));
        }
        let count = layer_shapes(widths, conditioning_dim)
            .iter()
            .map(|(i, o)| (i + 1) * o)
            .sum();
        Ok(Self {
            widths: widths.to_vec(),
            conditioning_dim,
            activation,
            params: vec![0.0; count],
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn conditioning_dim(&self) -> usize {
        self.conditioning_dim
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::contract(format!(
                "parameter length {} != {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    fn layer(&self, offset: usize, fan_in: usize, fan_out: usize) -> (ArrayView2<'_, f64>, ArrayView1<'_, f64>) {
        let w = ArrayView2::from_shape((fan_in, fan_out), &self.params[offset..offset + fan_in * fan_out])
            .expect("layer shape");
        let b = ArrayView1::from(&self.params[offset + fan_in * fan_out..offset + (fan_in + 1) * fan_out]);
        (w, b)
    }

    fn check_batch(&self, x: &ArrayView2<f64>, sigmas: &[f64]) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::contract(format!(
                "input width {} != network input width {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        if sigmas.len() != x.nrows() {
            return Err(Error::contract(format!(
                "{} sigmas for a batch of {}",
                sigmas.len(),
                x.nrows()
            )));
        }
        if let Some(bad) = sigmas.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
            return Err(Error::contract(format!("sigma must be positive and finite, got {bad}")));
        }
        Ok(())
    }

    /// Batched forward pass keeping the intermediates needed for reverse mode.
    pub fn forward_trace(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<ForwardTrace> {
        self.check_batch(&x, sigmas)?;
        let batch = x.nrows();
        let d = self.input_dim();
        let mut h = Array2::zeros((batch, d + self.conditioning_dim));
        h.slice_mut(s![.., ..d]).assign(&x);
        for (mut row, &sigma) in h.axis_iter_mut(Axis(0)).zip(sigmas) {
            let row = row.as_slice_mut().expect("contiguous row");
            sigma_embedding(sigma, self.conditioning_dim, &mut row[d..]);
        }

        let shapes = layer_shapes(&self.widths, self.conditioning_dim);
        let mut inputs = Vec::with_capacity(shapes.len());
        let mut pre = Vec::with_capacity(shapes.len() - 1);
        let mut offset = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let (w, b) = self.layer(offset, fan_in, fan_out);
            let mut z = h.dot(&w);
            z += &b;
            inputs.push(h);
            if l + 1 < shapes.len() {
                let act = self.activation;
                h = z.mapv(|v| act.apply(v));
                pre.push(z);
            } else {
                h = z;
            }
            offset += (fan_in + 1) * fan_out;
        }
        Ok(ForwardTrace { inputs, pre, output: h })
    }

    pub fn forward_batch(&self, x: ArrayView2<f64>, sigmas: &[f64]) -> Result<Array2<f64>> {
        Ok(self.forward_trace(x, sigmas)?.into_output())
    }

    pub fn forward(&self, input: &[f64], sigma: f64) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::contract(e.to_string()))?;
        Ok(self.forward_batch(x, &[sigma])?.into_raw_vec_and_offset().0)
    }

    /// Reverse mode for `sum_b <output_b, cotangent_b>`.
    ///
    /// Returns the parameter gradient (summed over the batch) and the gradient
    /// with respect to the data part of each input row.
    pub fn backward_batch(&self, trace: &ForwardTrace, cotangent: ArrayView2<f64>) -> Result<(Vec<f64>, Array2<f64>)> {
        let mut grad = vec![0.0; self.params.len()];
        let input_grad = self.backward_into(trace, cotangent, &mut grad)?;
        Ok((grad, input_grad))
    }

    /// Like [`Mlp::backward_batch`] but accumulates into `grad`.
    pub fn backward_into(
        &self,
        trace: &ForwardTrace,
        cotangent: ArrayView2<f64>,
        grad: &mut [f64],
    ) -> Result<Array2<f64>> {
        if cotangent.dim() != trace.output.dim() {
            return Err(Error::contract(format!(
                "cotangent shape {:?} != output shape {:?}",
                cotangent.dim(),
                trace.output.dim()
            )));
        }
        if grad.len() != self.params.len() {
            return Err(Error::contract("gradient buffer length mismatch"));
        }
        let shapes = layer_shapes(&self.widths, self.conditioning_dim);
        let mut offsets = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for &(fan_in, fan_out) in &shapes {
            offsets.push(offset);
            offset += (fan_in + 1) * fan_out;
        }

        let mut delta = cotangent.to_owned();
        for l in (0..shapes.len()).rev() {
            let (fan_in, fan_out) = shapes[l];
            let off = offsets[l];
            let input = &trace.inputs[l];
            {
                let mut gw = ArrayViewMut2::from_shape((fan_in, fan_out), &mut grad[off..off + fan_in * fan_out])
                    .expect("layer shape");
                gw += &input.t().dot(&delta);
            }
            let gb = delta.sum_axis(Axis(0));
            for (g, v) in grad[off + fan_in * fan_out..off + (fan_in + 1) * fan_out]
                .iter_mut()
                .zip(gb.iter())
            {
                *g += v;
            }
            let (w, _) = self.layer(off, fan_in, fan_out);
            let mut prev = delta.dot(&w.t());
            if l > 0 {
                let act = self.activation;
                prev.zip_mut_with(&trace.pre[l - 1], |d, &z| *d *= act.derivative(z));
            }
            delta = prev;
        }
        let d = self.input_dim();
        Ok(delta.slice(s![.., ..d]).to_owned())
    }

    /// Single-sample reverse mode: `(param_gradient, input_gradient)` of `<f(x, sigma), cotangent>`.
    pub fn backward(&self, input: &[f64], sigma: f64, cotangent: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|e| Error::contract(e.to_string()))?;
        let trace = self.forward_trace(x, &[sigma])?;
        let c = ArrayView2::from_shape((1, cotangent.len()), cotangent)
            .map_err(|e| Error::contract(e.to_string()))?;
        let (g, gi) = self.backward_batch(&trace, c)?;
        Ok((g, gi.into_raw_vec_and_offset().0))
    }

    const MAGIC: &'static [u8; 8] = b"IPFMMLP1";

    /// Checkpoint: magic, u32 layer-width count, u32 widths, u32 conditioning_dim,
    /// u32 activation code, u64 parameter count, then the parameters as f64.
    /// All integers and floats little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&(self.widths.len() as u32).to_le_bytes())?;
        for &width in &self.widths {
            w.write_all(&(width as u32).to_le_bytes())?;
        }
        w.write_all(&(self.conditioning_dim as u32).to_le_bytes())?;
        w.write_all(&self.activation.code().to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Parse("not an MLP checkpoint".into()));
        }
        let n = read_u32(&mut r)? as usize;
        if n > 1024 {
            return Err(Error::Parse(format!("implausible layer count {n}")));
        }
        let widths = (0..n)
            .map(|_| read_u32(&mut r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let cond = read_u32(&mut r)? as usize;
        let activation = Activation::from_code(read_u32(&mut r)?)?;
        let count = read_u64(&mut r)? as usize;
        let mut net = Mlp::zeros(&widths, cond, activation).map_err(|e| Error::Parse(e.to_string()))?;
        if count != net.params.len() {
            return Err(Error::Parse(format!(
                "checkpoint holds {count} parameters, architecture needs {}",
                net.params.len()
            )));
        }
        let mut buf = [0u8; 8];
        for p in net.params.iter_mut() {
            r.read_exact(&mut buf)?;
            *p = f64::from_le_bytes(buf);
        }
        Ok(net)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Stack equally sized rows into a batch matrix.
pub fn stack_rows(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::contract("ragged rows"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).map_err(|e| Error::contract(e.to_string()))
}

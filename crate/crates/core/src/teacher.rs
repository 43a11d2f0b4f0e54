//! Teacher construction: denoiser training and ODE sampling.

use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserTrace, Preconditioning};
use crate::error::{Error, Result};
use crate::field::{posterior_denoise, posterior_denoise_with_grad, ChargeSet};
use crate::kernel::{check_sigma, perturb, prior_sample, DimSpec};
use crate::numerics::{adam_step, dist_sq, Activation, AdamState, LrSchedule, Mlp, RngState};

/// Something that can be sampled point by point.
pub trait SampleSource {
    fn dim(&self) -> usize;
    fn draw(&self, rng: &mut RngState) -> Vec<f64>;
}

impl SampleSource for ChargeSet {
    fn dim(&self) -> usize {
        ChargeSet::dim(self)
    }

    fn draw(&self, rng: &mut RngState) -> Vec<f64> {
        self.sample(rng).to_vec()
    }
}

/// Log-normal training noise `ln sigma ~ N(p_mean, p_std^2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogNormalSigma {
    pub p_mean: f64,
    pub p_std: f64,
}

impl Default for LogNormalSigma {
    fn default() -> Self {
        Self { p_mean: -1.2, p_std: 1.2 }
    }
}

impl LogNormalSigma {
    pub fn sample(&self, rng: &mut RngState) -> f64 {
        (self.p_mean + self.p_std * rng.normal()).exp()
    }
}

/// Per-sample loss weight as a function of sigma.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossWeight {
    /// `(sigma^2 + sigma_data^2) / (sigma * sigma_data)^2`
    #[default]
    Edm,
    Unit,
}

impl LossWeight {
    pub fn at(self, sigma: f64, sigma_data: f64) -> f64 {
        match self {
            LossWeight::Edm => (sigma * sigma + sigma_data * sigma_data) / (sigma * sigma_data).powi(2),
            LossWeight::Unit => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub sigma_sampler: LogNormalSigma,
    pub loss_weight: LossWeight,
    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub batch: usize,
    pub steps: usize,
    /// Estimated from the data when absent.
    pub sigma_data: Option<f64>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub preconditioning: Preconditioning,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            sigma_sampler: LogNormalSigma::default(),
            loss_weight: LossWeight::Edm,
            lr: 2e-3,
            lr_schedule: LrSchedule::Cosine,
            batch: 256,
            steps: 4000,
            sigma_data: None,
            hidden: vec![128, 128, 128],
            activation: Activation::Silu,
            preconditioning: Preconditioning::Auto,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::config("teacher lr must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("teacher batch must be >= 1"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("teacher hidden widths must be nonempty and positive"));
        }
        if !(self.sigma_sampler.p_std >= 0.0) {
            return Err(Error::config("p_std must be >= 0"));
        }
        if let Some(sd) = self.sigma_data {
            if !(sd > 0.0) {
                return Err(Error::config("sigma_data must be positive"));
            }
        }
        Ok(())
    }
}

/// Empirical mean and pooled per-coordinate std of `n` draws.
pub fn data_moments(source: &dyn SampleSource, n: usize, rng: &mut RngState) -> (Vec<f64>, f64) {
    let dim = source.dim();
    let draws: Vec<Vec<f64>> = (0..n.max(2)).map(|_| source.draw(rng)).collect();
    let mut mean = vec![0.0; dim];
    for d in &draws {
        for (m, v) in mean.iter_mut().zip(d) {
            *m += v / draws.len() as f64;
        }
    }
    let var = draws.iter().map(|d| dist_sq(d, &mean)).sum::<f64>() / (draws.len() * dim) as f64;
    (mean, var.sqrt().max(1e-12))
}

/// One Adam step on the weighted denoising loss for a prepared batch.
///
/// Returns the batch loss `mean_b lambda_b |y_hat_b - y_b|^2`.
pub(crate) fn denoising_step(
    den: &mut Denoiser,
    adam: &mut AdamState,
    xs: &[Vec<f64>],
    sigmas: &[f64],
    targets: &[Vec<f64>],
    weights: &[f64],
    lr: f64,
) -> Result<f64> {
    let trace = den.forward_trace(xs, sigmas)?;
    let b = xs.len() as f64;
    let mut loss = 0.0;
    let cots: Vec<Vec<f64>> = trace
        .outputs()
        .iter()
        .zip(targets)
        .zip(weights)
        .map(|((o, y), &w)| {
            loss += w * dist_sq(o, y) / b;
            o.iter().zip(y).map(|(a, c)| 2.0 * w * (a - c) / b).collect()
        })
        .collect();
    if !loss.is_finite() {
        return Err(Error::training(
            "denoising loss is not finite",
            vec![("loss".into(), loss), ("step".into(), adam.step_count as f64)],
        ));
    }
    let mut grad = vec![0.0; den.param_count()];
    den.backward(&trace, &cots, Some(&mut grad))?;
    adam_step(den.params_mut(), &grad, adam, lr)?;
    Ok(loss)
}

/// Train a denoiser on the weighted denoising objective.
pub fn train_denoiser(
    data: &dyn SampleSource,
    spec: &DimSpec,
    cfg: &TeacherConfig,
    rng: &mut RngState,
) -> Result<Denoiser> {
    cfg.validate()?;
    if data.dim() != spec.data_dim {
        return Err(Error::config("data dimension does not match the DimSpec"));
    }
    let mut init_rng = rng.derive(1);
    let (mean, sd_est) = data_moments(data, 4096, &mut rng.derive(2));
    let sigma_data = cfg.sigma_data.unwrap_or(sd_est);
    let mut widths = vec![spec.data_dim];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(spec.data_dim);
    let net = Mlp::new(&widths, 4, cfg.activation, &mut init_rng)?;
    let mut den = Denoiser::new(net, *spec, sigma_data, mean, cfg.preconditioning)?;
    continue_training(&mut den, data, cfg, rng)?;
    Ok(den)
}

/// Further training of an existing denoiser on `data`.
pub fn continue_training(
    den: &mut Denoiser,
    data: &dyn SampleSource,
    cfg: &TeacherConfig,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    let spec = *den.spec();
    let mut adam = AdamState::new(den.param_count());
    let mut stream = rng.derive(3);
    let mut losses = Vec::with_capacity(cfg.steps);
    let sd = den.sigma_data();
    for step in 0..cfg.steps {
        let mut ys = Vec::with_capacity(cfg.batch);
        let mut xs = Vec::with_capacity(cfg.batch);
        let mut sigmas = Vec::with_capacity(cfg.batch);
        let mut ws = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let y = data.draw(&mut stream);
            let s = cfg.sigma_sampler.sample(&mut stream);
            xs.push(perturb(&y, &spec, s, &mut stream)?);
            ys.push(y);
            sigmas.push(s);
            ws.push(cfg.loss_weight.at(s, sd));
        }
        let lr = cfg.lr * cfg.lr_schedule.factor(step, cfg.steps);
        let loss = denoising_step(den, &mut adam, &xs, &sigmas, &ys, &ws, lr)?;
        if step % 500 == 0 {
            log::debug!("teacher step {step}: loss {loss:.5}");
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Mean per-coordinate squared deviation of `den` from the posterior mean on
/// held-out probes `y ~ data`, `sigma ~ p(sigma)`, `x ~ kernel(y, sigma)`.
pub fn oracle_mse(
    den: &Denoiser,
    charges: &ChargeSet,
    sampler: &LogNormalSigma,
    n_probes: usize,
    rng: &mut RngState,
) -> Result<f64> {
    let spec = *den.spec();
    let mut xs = Vec::with_capacity(n_probes);
    let mut sigmas = Vec::with_capacity(n_probes);
    for _ in 0..n_probes {
        let y = charges.sample(rng).to_vec();
        let s = sampler.sample(rng);
        xs.push(perturb(&y, &spec, s, rng)?);
        sigmas.push(s);
    }
    let preds = den.forward_batch(&xs, &sigmas)?;
    let mut total = 0.0;
    for ((x, s), p) in xs.iter().zip(&sigmas).zip(&preds) {
        let o = posterior_denoise(charges, x, *s, &spec)?;
        total += dist_sq(p, &o);
    }
    Ok(total / (n_probes * spec.data_dim) as f64)
}

/// A denoiser `(x, sigma) -> y_hat`, either exact or learned.
#[derive(Clone, Debug)]
pub enum TeacherModel {
    Oracle { charges: ChargeSet, spec: DimSpec },
    Network(Denoiser),
}

/// What the teacher needs to run reverse mode after a forward pass.
pub enum TeacherTrace {
    Oracle { xs: Vec<Vec<f64>>, sigmas: Vec<f64> },
    Network(DenoiserTrace),
}

impl TeacherModel {
    pub fn oracle(charges: ChargeSet, spec: DimSpec) -> Result<Self> {
        if charges.dim() != spec.data_dim {
            return Err(Error::config("charge dimension does not match the DimSpec"));
        }
        Ok(TeacherModel::Oracle { charges, spec })
    }

    pub fn spec(&self) -> &DimSpec {
        match self {
            TeacherModel::Oracle { spec, .. } => spec,
            TeacherModel::Network(d) => d.spec(),
        }
    }

    pub fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        match self {
            TeacherModel::Oracle { charges, spec } => posterior_denoise(charges, x, sigma, spec),
            TeacherModel::Network(d) => d.forward(x, sigma),
        }
    }

    pub fn denoise_batch(&self, xs: &[Vec<f64>], sigmas: &[f64]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_trace(xs, sigmas)?.0)
    }

    pub fn forward_trace(&self, xs: &[Vec<f64>], sigmas: &[f64]) -> Result<(Vec<Vec<f64>>, TeacherTrace)> {
        match self {
            TeacherModel::Oracle { charges, spec } => {
                if xs.len() != sigmas.len() {
                    return Err(Error::contract("inputs and sigmas differ in length"));
                }
                let out = xs
                    .iter()
                    .zip(sigmas)
                    .map(|(x, &s)| posterior_denoise(charges, x, s, spec))
                    .collect::<Result<Vec<_>>>()?;
                Ok((
                    out,
                    TeacherTrace::Oracle {
                        xs: xs.to_vec(),
                        sigmas: sigmas.to_vec(),
                    },
                ))
            }
            TeacherModel::Network(d) => {
                let t = d.forward_trace(xs, sigmas)?;
                Ok((t.outputs().to_vec(), TeacherTrace::Network(t)))
            }
        }
    }

    /// Input gradients of `sum_b <y_hat_b, cot_b>` with teacher parameters frozen.
    pub fn input_vjp(&self, trace: &TeacherTrace, cots: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match (self, trace) {
            (TeacherModel::Oracle { charges, spec }, TeacherTrace::Oracle { xs, sigmas }) => xs
                .iter()
                .zip(sigmas)
                .zip(cots)
                .map(|((x, &s), c)| posterior_denoise_with_grad(charges, x, s, spec, c).map(|r| r.1))
                .collect(),
            (TeacherModel::Network(d), TeacherTrace::Network(t)) => d.backward(t, cots, None),
            _ => Err(Error::contract("trace does not belong to this teacher")),
        }
    }
}

/// `dx/dsigma = (x - y_hat) / sigma`.
pub fn ode_rhs(teacher: &TeacherModel, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
    check_sigma(sigma)?;
    let y = teacher.denoise(x, sigma)?;
    crate::field::normalized_field(&y, x, sigma, teacher.spec())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeMethod {
    Euler,
    #[default]
    Heun,
}

/// Integration variable for the sampling ODE.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OdeTime {
    /// Steps uniform in the grid's sigma values: `dx/dsigma = (x - y_hat)/sigma`.
    #[default]
    Sigma,
    /// Same grid, stepping in `ln sigma`: `dx/d ln sigma = x - y_hat`.
    LogSigma,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdeOutput {
    pub samples: Vec<Vec<f64>>,
    /// Teacher evaluations per sample.
    pub nfe: usize,
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::config("sigma grid needs at least 2 points"));
    }
    if grid.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
        return Err(Error::config("sigma grid values must be positive"));
    }
    if grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::config("sigma grid must be strictly decreasing"));
    }
    Ok(())
}

/// Velocity in the chosen time variable for a batch.
fn velocity(teacher: &TeacherModel, xs: &[Vec<f64>], sigma: f64, time: OdeTime) -> Result<Vec<Vec<f64>>> {
    let sig = vec![sigma; xs.len()];
    let ys = teacher.denoise_batch(xs, &sig)?;
    Ok(xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(a, b)| match time {
                    OdeTime::Sigma => (a - b) / sigma,
                    OdeTime::LogSigma => a - b,
                })
                .collect()
        })
        .collect())
}

fn axpy(x: &[Vec<f64>], h: f64, v: &[Vec<f64>]) -> Vec<Vec<f64>> {
    x.iter()
        .zip(v)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p + h * q).collect())
        .collect()
}

/// Integrate the sampling ODE over `grid` from given start points.
///
/// Heun takes a predictor-corrector step on every interval except the last,
/// which is a plain Euler step.
pub fn ode_integrate(
    teacher: &TeacherModel,
    grid: &[f64],
    start: Vec<Vec<f64>>,
    method: OdeMethod,
    time: OdeTime,
) -> Result<OdeOutput> {
    check_grid(grid)?;
    let coord = |s: f64| match time {
        OdeTime::Sigma => s,
        OdeTime::LogSigma => s.ln(),
    };
    let mut x = start;
    let mut nfe = 0;
    let last = grid.len() - 2;
    for (i, w) in grid.windows(2).enumerate() {
        let (s0, s1) = (w[0], w[1]);
        let h = coord(s1) - coord(s0);
        let v0 = velocity(teacher, &x, s0, time)?;
        nfe += 1;
        let pred = axpy(&x, h, &v0);
        if method == OdeMethod::Euler || i == last {
            x = pred;
            continue;
        }
        let v1 = velocity(teacher, &pred, s1, time)?;
        nfe += 1;
        let avg: Vec<Vec<f64>> = v0
            .iter()
            .zip(&v1)
            .map(|(a, b)| a.iter().zip(b).map(|(p, q)| 0.5 * (p + q)).collect())
            .collect();
        x = axpy(&x, h, &avg);
    }
    Ok(OdeOutput { samples: x, nfe })
}

/// Draw `n_samples` prior points at `grid[0]` and integrate them to `grid[last]`.
pub fn ode_sample(
    teacher: &TeacherModel,
    grid: &[f64],
    n_samples: usize,
    method: OdeMethod,
    rng: &mut RngState,
) -> Result<OdeOutput> {
    check_grid(grid)?;
    let spec = *teacher.spec();
    let start = (0..n_samples)
        .map(|_| prior_sample(&spec, grid[0], rng))
        .collect::<Result<Vec<_>>>()?;
    ode_integrate(teacher, grid, start, method, OdeTime::Sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{AuxDim, NoiseSchedule};

    fn single(aux: AuxDim) -> TeacherModel {
        let spec = DimSpec::new(2, aux).unwrap();
        TeacherModel::oracle(ChargeSet::uniform(vec![vec![0.5, -1.0]]).unwrap(), spec).unwrap()
    }

    #[test]
    fn rhs_single_charge() {
        let t = single(AuxDim::Finite(4));
        let v = ode_rhs(&t, &[1.5, 1.0], 2.0).unwrap();
        assert_eq!(v, vec![0.5, 1.0]);
        assert_eq!(ode_rhs(&t, &[0.5, -1.0], 2.0).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(ode_rhs(&t, &[0.0, 0.0], 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn single_step_grid_is_euler() {
        let t = single(AuxDim::Infinite);
        let grid = vec![80.0, 0.002];
        let x0 = vec![10.0, -3.0];
        let out = ode_integrate(&t, &grid, vec![x0.clone()], OdeMethod::Heun, OdeTime::Sigma).unwrap();
        let rhs = ode_rhs(&t, &x0, 80.0).unwrap();
        for j in 0..2 {
            assert_eq!(out.samples[0][j], x0[j] + (0.002 - 80.0) * rhs[j]);
        }
        assert_eq!(out.nfe, 1);
    }

    #[test]
    fn heun_nfe_convention() {
        let t = single(AuxDim::Infinite);
        let grid = NoiseSchedule::default().karras_grid(18).unwrap();
        let out = ode_integrate(&t, &grid, vec![vec![0.0, 0.0]], OdeMethod::Heun, OdeTime::Sigma).unwrap();
        assert_eq!(out.nfe, 2 * 17 - 1);
        let out = ode_integrate(&t, &grid, vec![vec![0.0, 0.0]], OdeMethod::Euler, OdeTime::Sigma).unwrap();
        assert_eq!(out.nfe, 17);
    }

    #[test]
    fn grid_validation() {
        let t = single(AuxDim::Infinite);
        for g in [vec![1.0], vec![1.0, 2.0], vec![2.0, 2.0], vec![2.0, 0.0]] {
            assert!(matches!(
                ode_integrate(&t, &g, vec![vec![0.0, 0.0]], OdeMethod::Heun, OdeTime::Sigma),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn linear_solution_in_sigma_time() {
        // x(sigma) = y0 + (x0 - y0) sigma / sigma_max; both integrators are exact here.
        let t = single(AuxDim::Finite(8));
        let grid = NoiseSchedule::default().karras_grid(35).unwrap();
        let x0 = vec![30.0, -12.0];
        let exact: Vec<f64> = x0
            .iter()
            .zip([0.5, -1.0])
            .map(|(x, y)| y + (x - y) * 0.002 / 80.0)
            .collect();
        for m in [OdeMethod::Heun, OdeMethod::Euler] {
            let out = ode_integrate(&t, &grid, vec![x0.clone()], m, OdeTime::Sigma).unwrap();
            for j in 0..2 {
                assert!((out.samples[0][j] - exact[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn log_sigma_time_accuracy() {
        let t = single(AuxDim::Infinite);
        let grid = NoiseSchedule::default().karras_grid(35).unwrap();
        let x0 = vec![30.0, -12.0];
        let exact = [0.5 + 29.5 * 0.002 / 80.0, -1.0 - 11.0 * 0.002 / 80.0];
        let heun = ode_integrate(&t, &grid, vec![x0.clone()], OdeMethod::Heun, OdeTime::LogSigma).unwrap();
        let euler = ode_integrate(&t, &grid, vec![x0], OdeMethod::Euler, OdeTime::LogSigma).unwrap();
        let err = |s: &[f64]| ((s[0] - exact[0]).powi(2) + (s[1] - exact[1]).powi(2)).sqrt();
        assert!(err(&heun.samples[0]) < err(&euler.samples[0]));
        assert!(err(&euler.samples[0]) < 1e-2);
    }

    #[test]
    fn trained_single_point_teacher() {
        let data = ChargeSet::uniform(vec![vec![1.0, -2.0]]).unwrap();
        let spec = DimSpec::infinite(2).unwrap();
        let cfg = TeacherConfig {
            steps: 8000,
            batch: 64,
            hidden: vec![64, 64],
            sigma_data: Some(0.5),
            ..Default::default()
        };
        let den = train_denoiser(&data, &spec, &cfg, &mut RngState::new(0)).unwrap();
        let mut rng = RngState::new(9);
        for _ in 0..100 {
            let s = cfg.sigma_sampler.sample(&mut rng);
            let x = perturb(&[1.0, -2.0], &spec, s, &mut rng).unwrap();
            let y = den.forward(&x, s).unwrap();
            assert!(dist_sq(&y, &[1.0, -2.0]).sqrt() < 0.05, "sigma {s} -> {y:?}");
        }
    }

    #[test]
    fn network_trace_vjp_matches_denoiser() {
        let spec = DimSpec::finite(2, 4).unwrap();
        let den = Denoiser::init(spec, &[6], Activation::Tanh, 1.0, vec![0.0; 2], &mut RngState::new(1)).unwrap();
        let t = TeacherModel::Network(den.clone());
        let xs = vec![vec![0.3, 0.2]];
        let (out, tr) = t.forward_trace(&xs, &[0.7]).unwrap();
        assert_eq!(out[0], den.forward(&xs[0], 0.7).unwrap());
        let g = t.input_vjp(&tr, &[vec![1.0, 0.0]]).unwrap();
        let dt = den.forward_trace(&xs, &[0.7]).unwrap();
        assert_eq!(g, den.backward(&dt, &[vec![1.0, 0.0]], None).unwrap());
    }
}

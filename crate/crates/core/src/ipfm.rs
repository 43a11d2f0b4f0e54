//! Distillation of a teacher denoiser into a one- or few-step generator.
//!
//! A student denoiser tracks the generator's current distribution while the
//! generator descends the gap between teacher and student fields, written in
//! denoising form:
//!
//! ```text
//! L = λ [ |ŷ_teacher - y|² - |ŷ_student - y|² - (2α - 1) |ŷ_teacher - ŷ_student|² ]
//! ```
//!
//! with `x = y + R v` perturbed at a sampled noise level and `α = 1/2` the
//! unregularized objective.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::eval::metrics::energy_distance;
use crate::kernel::{sample_displacement, AuxDim, DimSpec, NoiseSchedule};
use crate::numerics::{adam_step, dist_sq, dot, read_u32, AdamState, LrSchedule, RngState};
use crate::teacher::{denoising_step, LogNormalSigma, LossWeight, TeacherModel};

/// `λ = C / |ŷ_teacher - y|_1`, a constant under differentiation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorLambda {
    pub value: f64,
    /// The denominator was below `1e-8` and was clamped.
    pub clamped: bool,
}

pub fn lambda_generator(y_hat_teacher: &[f64], y: &[f64], data_dim: usize) -> Result<GeneratorLambda> {
    if y_hat_teacher.len() != y.len() {
        return Err(Error::contract("lambda: vector lengths differ"));
    }
    let l1: f64 = y_hat_teacher.iter().zip(y).map(|(a, b)| (a - b).abs()).sum();
    let clamped = l1 < 1e-8;
    Ok(GeneratorLambda {
        value: data_dim as f64 / l1.max(1e-8),
        clamped,
    })
}

fn check_triple(a: &[f64], b: &[f64], y: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.len() != y.len() {
        return Err(Error::contract("denoiser outputs and target differ in length"));
    }
    Ok(())
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `λ [|ŷ_t - y|² - |ŷ_s - y|² - (2α - 1)|ŷ_t - ŷ_s|²]`.
pub fn generator_loss_per_sample(
    y_hat_teacher: &[f64],
    y_hat_student: &[f64],
    y: &[f64],
    alpha: f64,
    lambda: f64,
) -> Result<f64> {
    check_triple(y_hat_teacher, y_hat_student, y)?;
    Ok(lambda
        * (dist_sq(y_hat_teacher, y)
            - dist_sq(y_hat_student, y)
            - (2.0 * alpha - 1.0) * dist_sq(y_hat_teacher, y_hat_student)))
}

/// Score-identity integrand `λ [|ŷ_t - ŷ_s|² + <ŷ_t - ŷ_s, ŷ_s - y>]`.
pub fn sid_generator_loss_per_sample(
    y_hat_teacher: &[f64],
    y_hat_student: &[f64],
    y: &[f64],
    lambda: f64,
) -> Result<f64> {
    check_triple(y_hat_teacher, y_hat_student, y)?;
    let d = diff(y_hat_teacher, y_hat_student);
    let e = diff(y_hat_student, y);
    Ok(lambda * (dot(&d, &d) + dot(&d, &e)))
}

/// Score-identity integrand with its own regularizer: `sid - α λ |ŷ_t - ŷ_s|²`.
pub fn sid_regularized_per_sample(
    y_hat_teacher: &[f64],
    y_hat_student: &[f64],
    y: &[f64],
    alpha: f64,
    lambda: f64,
) -> Result<f64> {
    Ok(sid_generator_loss_per_sample(y_hat_teacher, y_hat_student, y, lambda)?
        - alpha * lambda * dist_sq(y_hat_teacher, y_hat_student))
}

/// `|(|ŷ_t - y|² - |ŷ_s - y|²) - (2 sid - |ŷ_t - ŷ_s|²)|` with `λ = 1`.
pub fn check_score_identity(y_hat_teacher: &[f64], y_hat_student: &[f64], y: &[f64]) -> Result<f64> {
    let lhs = generator_loss_per_sample(y_hat_teacher, y_hat_student, y, 0.5, 1.0)?;
    let rhs = 2.0 * sid_generator_loss_per_sample(y_hat_teacher, y_hat_student, y, 1.0)?
        - dist_sq(y_hat_teacher, y_hat_student);
    Ok((lhs - rhs).abs())
}

/// One `(ŷ_teacher, ŷ_student, y)` sample.
pub type Triple = (Vec<f64>, Vec<f64>, Vec<f64>);

/// Largest relative residual of `sid^{α=1/2} = ipfm / 2` over a batch.
pub fn check_alpha_half_equivalence(triples: &[Triple], lambdas: &[f64]) -> Result<f64> {
    if triples.len() != lambdas.len() {
        return Err(Error::contract("one lambda per triple"));
    }
    let mut worst = 0.0f64;
    for ((t, s, y), &l) in triples.iter().zip(lambdas) {
        let a = sid_regularized_per_sample(t, s, y, 0.5, l)?;
        let b = 0.5 * generator_loss_per_sample(t, s, y, 0.5, l)?;
        let scale = l * (dist_sq(t, y) + dist_sq(s, y) + dist_sq(t, s)) + 1.0;
        worst = worst.max((a - b).abs() / scale);
    }
    Ok(worst)
}

/// Weighting of the generator loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorWeight {
    /// `C / |ŷ_teacher - y|_1` with stop-gradient.
    #[default]
    Adaptive,
    Unit,
}

/// How the student and generator start.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Both copy the initialization network's weights.
    #[default]
    CopyTeacher,
    /// Fresh random weights with the initialization network's architecture.
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub alpha: f64,
    pub t_max: f64,
    pub sigma_init: f64,
    /// Last level of the multi-step chain schedule.
    pub sigma_min_multistep: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub lr_student: f64,
    pub lr_generator: f64,
    pub lr_schedule: LrSchedule,
    pub batch: usize,
    /// Generator samples consumed by generator updates.
    pub budget: usize,
    pub nfe: usize,
    pub student_updates_per_generator_update: usize,
    pub student_sigma: LogNormalSigma,
    pub student_weight: LossWeight,
    pub generator_weight: GeneratorWeight,
    pub init: InitMode,
    /// Generator updates between log records.
    pub eval_every: usize,
    pub eval_samples: usize,
    pub divergence_threshold: f64,
    pub max_lr_halvings: u32,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            t_max: 0.98,
            sigma_init: 2.5,
            sigma_min_multistep: 0.02,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            lr_student: 3e-4,
            lr_generator: 1e-4,
            lr_schedule: LrSchedule::Constant,
            batch: 32,
            budget: 30_000,
            nfe: 1,
            student_updates_per_generator_update: 1,
            student_sigma: LogNormalSigma::default(),
            student_weight: LossWeight::Edm,
            generator_weight: GeneratorWeight::Adaptive,
            init: InitMode::CopyTeacher,
            eval_every: 50,
            eval_samples: 1000,
            divergence_threshold: 1e6,
            max_lr_halvings: 8,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.alpha.is_finite() {
            return Err(Error::config("alpha must be finite"));
        }
        if !(self.sigma_init > 0.0 && self.sigma_min_multistep > 0.0) {
            return Err(Error::config("sigma_init and sigma_min_multistep must be positive"));
        }
        if !(self.lr_student > 0.0 && self.lr_generator > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.batch == 0 || self.nfe == 0 {
            return Err(Error::config("batch and nfe must be >= 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every must be >= 1"));
        }
        self.schedule().validate()
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule {
            sigma_min: self.sigma_min,
            sigma_max: self.sigma_max,
            rho: self.rho,
            t_max: self.t_max,
        }
    }

    /// Number of generator updates the budget pays for.
    pub fn generator_updates(&self) -> usize {
        self.budget.div_ceil(self.batch)
    }
}

/// One- or few-step generator built on a denoiser network.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorModel {
    pub net: Denoiser,
    pub sigma_init: f64,
    /// Condition later chain steps on their own noise level rather than `sigma_init`.
    pub sigma_conditioned: bool,
}

impl GeneratorModel {
    pub fn new(net: Denoiser, sigma_init: f64) -> Self {
        Self {
            net,
            sigma_init,
            sigma_conditioned: true,
        }
    }

    pub fn spec(&self) -> &DimSpec {
        self.net.spec()
    }

    pub fn prior_draw(&self, rng: &mut RngState) -> Result<Vec<f64>> {
        sample_displacement(self.spec(), self.sigma_init, rng)
    }

    fn condition(&self, sigma: f64) -> f64 {
        if self.sigma_conditioned {
            sigma
        } else {
            self.sigma_init
        }
    }

    /// Single-step samples `G(z, sigma_init)`.
    pub fn generate(&self, n: usize, rng: &mut RngState) -> Result<Vec<Vec<f64>>> {
        self.generate_multistep(n, 1, 0.02, rng)
    }

    /// Noise levels `sigma_1..sigma_{N-1}` of the multi-step chain.
    pub fn chain_sigmas(&self, nfe: usize, sigma_min: f64) -> Result<Vec<f64>> {
        multistep_sigmas(self.sigma_init, sigma_min, nfe)
    }

    /// `n` samples of the `nfe`-step chain.
    pub fn generate_multistep(
        &self,
        n: usize,
        nfe: usize,
        sigma_min: f64,
        rng: &mut RngState,
    ) -> Result<Vec<Vec<f64>>> {
        let (inputs, sigmas) = self.chain_inputs(n, nfe, nfe - 1, sigma_min, rng)?;
        self.net.forward_batch(&inputs, &sigmas)
    }

    /// Generator inputs and conditioning levels for chain call `step` (0-based).
    ///
    /// Earlier calls run without gradients.
    pub fn chain_inputs(
        &self,
        n: usize,
        nfe: usize,
        step: usize,
        sigma_min: f64,
        rng: &mut RngState,
    ) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let levels = self.chain_sigmas(nfe, sigma_min)?;
        if step >= nfe {
            return Err(Error::contract(format!("chain step {step} of {nfe}")));
        }
        let mut x = (0..n).map(|_| self.prior_draw(rng)).collect::<Result<Vec<_>>>()?;
        let mut cond = vec![self.sigma_init; n];
        for &s in levels.iter().take(step) {
            let y = self.net.forward_batch(&x, &cond)?;
            x = y
                .iter()
                .map(|yi| {
                    let d = sample_displacement(self.spec(), s, rng)?;
                    Ok(yi.iter().zip(d).map(|(a, b)| a + b).collect())
                })
                .collect::<Result<Vec<_>>>()?;
            cond = vec![self.condition(s); n];
        }
        Ok((x, cond))
    }

    const MAGIC: &'static [u8; 8] = b"IPFMGEN1";

    /// Checkpoint: magic, f64 sigma_init, u32 conditioning flag, then the denoiser checkpoint.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(Self::MAGIC)?;
        w.write_all(&self.sigma_init.to_le_bytes())?;
        w.write_all(&(self.sigma_conditioned as u32).to_le_bytes())?;
        self.net.write_to(w)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != Self::MAGIC {
            return Err(Error::Parse("not a generator checkpoint".into()));
        }
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let sigma_init = f64::from_le_bytes(b);
        let sigma_conditioned = read_u32(&mut r)? != 0;
        let net = Denoiser::read_from(r)?;
        Ok(Self {
            net,
            sigma_init,
            sigma_conditioned,
        })
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

/// `sigma_n = sigma_init + (n - 1)/N (sigma_min - sigma_init)` for `n = 1..N-1`.
pub fn multistep_sigmas(sigma_init: f64, sigma_min: f64, nfe: usize) -> Result<Vec<f64>> {
    if nfe == 0 {
        return Err(Error::config("multi-step sampling needs N >= 1"));
    }
    Ok((1..nfe)
        .map(|n| sigma_init + (n - 1) as f64 / nfe as f64 * (sigma_min - sigma_init))
        .collect())
}

/// One multi-step sample.
pub fn multistep_sample(generator: &GeneratorModel, n_steps: usize, sigma_min: f64, rng: &mut RngState) -> Result<Vec<f64>> {
    if n_steps == 0 {
        return Err(Error::config("multi-step sampling needs N >= 1"));
    }
    Ok(generator
        .generate_multistep(1, n_steps, sigma_min, rng)?
        .pop()
        .expect("one sample"))
}

/// Optimizer state for one side of the game.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub adam: AdamState,
    pub lr: f64,
}

impl Trainer {
    pub fn new(params: usize, lr: f64) -> Self {
        Self {
            adam: AdamState::new(params),
            lr,
        }
    }
}

/// Which chain call the generator loss is taken on and the student learns from.
fn pick_step(cfg: &DistillConfig, rng: &mut RngState) -> usize {
    if cfg.nfe <= 1 {
        0
    } else {
        rng.index(cfg.nfe)
    }
}

/// One Adam step of the student on denoising generator samples.
pub fn student_update(
    student: &mut Denoiser,
    generator: &GeneratorModel,
    cfg: &DistillConfig,
    trainer: &mut Trainer,
    lr: f64,
    rng: &mut RngState,
) -> Result<f64> {
    let spec = *student.spec();
    let step = pick_step(cfg, rng);
    let (inputs, conds) = generator.chain_inputs(cfg.batch, cfg.nfe, step, cfg.sigma_min_multistep, rng)?;
    let ys = generator.net.forward_batch(&inputs, &conds)?;
    let sd = student.sigma_data();
    let mut xs = Vec::with_capacity(ys.len());
    let mut sigmas = Vec::with_capacity(ys.len());
    let mut ws = Vec::with_capacity(ys.len());
    for y in &ys {
        let s = cfg.student_sigma.sample(rng);
        let d = sample_displacement(&spec, s, rng)?;
        xs.push(y.iter().zip(d).map(|(a, b)| a + b).collect());
        sigmas.push(s);
        ws.push(cfg.student_weight.at(s, sd));
    }
    denoising_step(student, &mut trainer.adam, &xs, &sigmas, &ys, &ws, lr)
}

/// Per-sample pieces of a generator loss evaluation.
#[derive(Clone, Debug, Default)]
pub struct GeneratorLossParts {
    pub loss: f64,
    pub teacher_term: f64,
    pub student_term: f64,
    pub regularizer: f64,
    pub clamped_lambdas: usize,
}

/// Generator loss and its parameter gradient for a prepared batch of generator inputs.
///
/// `displacements` are the kernel draws `R v`, one per input; `sigmas` the
/// noise levels they were drawn at.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss_and_grad(
    generator: &GeneratorModel,
    teacher: &TeacherModel,
    student: &Denoiser,
    inputs: &[Vec<f64>],
    conds: &[f64],
    sigmas: &[f64],
    displacements: &[Vec<f64>],
    cfg: &DistillConfig,
    grad: &mut [f64],
) -> Result<GeneratorLossParts> {
    let n = generator.spec().data_dim;
    let b = inputs.len() as f64;
    let g_trace = generator.net.forward_trace(inputs, conds)?;
    let ys = g_trace.outputs();
    let xs: Vec<Vec<f64>> = ys
        .iter()
        .zip(displacements)
        .map(|(y, d)| y.iter().zip(d).map(|(a, c)| a + c).collect())
        .collect();
    let (t_out, t_trace) = teacher.forward_trace(&xs, sigmas)?;
    let s_trace = student.forward_trace(&xs, sigmas)?;
    let s_out = s_trace.outputs();
    let reg = 2.0 * cfg.alpha - 1.0;
    let mut parts = GeneratorLossParts::default();
    let mut cot_t = Vec::with_capacity(ys.len());
    let mut cot_s = Vec::with_capacity(ys.len());
    let mut cot_y = Vec::with_capacity(ys.len());
    for i in 0..ys.len() {
        let (t, s, y) = (&t_out[i], &s_out[i], &ys[i]);
        let lam = match cfg.generator_weight {
            GeneratorWeight::Adaptive => {
                let l = lambda_generator(t, y, n)?;
                parts.clamped_lambdas += l.clamped as usize;
                l.value
            }
            GeneratorWeight::Unit => 1.0,
        };
        let tt = dist_sq(t, y);
        let ss = dist_sq(s, y);
        let ts = dist_sq(t, s);
        parts.teacher_term += lam * tt / b;
        parts.student_term += lam * ss / b;
        parts.regularizer += lam * ts / b;
        parts.loss += lam * (tt - ss - reg * ts) / b;
        let k = 2.0 * lam / b;
        cot_t.push((0..n).map(|j| k * ((t[j] - y[j]) - reg * (t[j] - s[j]))).collect::<Vec<f64>>());
        cot_s.push((0..n).map(|j| k * (-(s[j] - y[j]) + reg * (t[j] - s[j]))).collect::<Vec<f64>>());
        cot_y.push((0..n).map(|j| k * (-(t[j] - y[j]) + (s[j] - y[j]))).collect::<Vec<f64>>());
    }
    if !parts.loss.is_finite() {
        return Ok(parts);
    }
    // x = y + R v, so gradients reaching x flow straight to y
    let gx_t = teacher.input_vjp(&t_trace, &cot_t)?;
    let gx_s = student.backward(&s_trace, &cot_s, None)?;
    for ((cy, a), c) in cot_y.iter_mut().zip(&gx_t).zip(&gx_s) {
        for j in 0..n {
            cy[j] += a[j] + c[j];
        }
    }
    generator.net.backward(&g_trace, &cot_y, Some(grad))?;
    Ok(parts)
}

/// Draw generator-update noise: `t ~ U[0, t_max]`, `sigma = sigma(t)`, `R v` at that level.
fn draw_generator_noise(
    spec: &DimSpec,
    cfg: &DistillConfig,
    n: usize,
    rng: &mut RngState,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let sched = cfg.schedule();
    let mut sigmas = Vec::with_capacity(n);
    let mut disp = Vec::with_capacity(n);
    for _ in 0..n {
        let s = sched.sample_training_sigma(rng);
        disp.push(sample_displacement(spec, s, rng)?);
        sigmas.push(s);
    }
    Ok((sigmas, disp))
}

/// One Adam step of the generator (chain call `step` when `nfe > 1`).
pub fn generator_update(
    generator: &mut GeneratorModel,
    teacher: &TeacherModel,
    student: &Denoiser,
    cfg: &DistillConfig,
    trainer: &mut Trainer,
    lr: f64,
    rng: &mut RngState,
) -> Result<GeneratorLossParts> {
    let step = pick_step(cfg, rng);
    multistep_train_step_at(generator, teacher, student, cfg, trainer, lr, step, rng)
}

/// Generator update on a uniformly chosen chain call; identical to
/// [`generator_update`] and kept under the multi-step name for clarity.
pub fn multistep_train_step(
    generator: &mut GeneratorModel,
    teacher: &TeacherModel,
    student: &Denoiser,
    cfg: &DistillConfig,
    trainer: &mut Trainer,
    lr: f64,
    rng: &mut RngState,
) -> Result<GeneratorLossParts> {
    generator_update(generator, teacher, student, cfg, trainer, lr, rng)
}

#[allow(clippy::too_many_arguments)]
fn multistep_train_step_at(
    generator: &mut GeneratorModel,
    teacher: &TeacherModel,
    student: &Denoiser,
    cfg: &DistillConfig,
    trainer: &mut Trainer,
    lr: f64,
    step: usize,
    rng: &mut RngState,
) -> Result<GeneratorLossParts> {
    let spec = *generator.spec();
    let (inputs, conds) = generator.chain_inputs(cfg.batch, cfg.nfe, step, cfg.sigma_min_multistep, rng)?;
    let (sigmas, disp) = draw_generator_noise(&spec, cfg, inputs.len(), rng)?;
    let mut grad = vec![0.0; generator.net.param_count()];
    let parts = generator_loss_and_grad(generator, teacher, student, &inputs, &conds, &sigmas, &disp, cfg, &mut grad)?;
    if !parts.loss.is_finite() || parts.loss.abs() > cfg.divergence_threshold {
        return Err(Error::training(
            "generator loss diverged",
            vec![
                ("loss".into(), parts.loss),
                ("teacher_term".into(), parts.teacher_term),
                ("student_term".into(), parts.student_term),
                ("regularizer".into(), parts.regularizer),
                ("sigma_min_batch".into(), sigmas.iter().cloned().fold(f64::INFINITY, f64::min)),
                ("sigma_max_batch".into(), sigmas.iter().cloned().fold(0.0, f64::max)),
            ],
        ));
    }
    adam_step(generator.net.params_mut(), &grad, &mut trainer.adam, lr)?;
    Ok(parts)
}

/// One JSON-lines record of a distillation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub update_index: usize,
    pub samples_consumed: usize,
    #[serde(rename = "D")]
    pub d: AuxDim,
    pub alpha: f64,
    pub nfe: usize,
    pub loss_student: f64,
    pub loss_generator: f64,
    pub energy_distance: Option<f64>,
    pub seed: u64,
}

/// Reference data and protocol for in-run evaluation.
#[derive(Clone, Debug)]
pub struct EvalProbe {
    pub reference: Vec<Vec<f64>>,
    pub n_generated: usize,
    pub seed: u64,
}

impl EvalProbe {
    /// Energy distance of fresh generator samples (fixed noise seed) to the reference.
    pub fn energy_distance(&self, generator: &GeneratorModel, nfe: usize, sigma_min: f64) -> Result<f64> {
        let mut rng = RngState::with_stream(self.seed, 0xe7a1);
        let gen = generator.generate_multistep(self.n_generated, nfe, sigma_min, &mut rng)?;
        energy_distance(&gen, &self.reference)
    }
}

#[derive(Clone, Debug)]
pub struct DistillOutcome {
    pub generator: GeneratorModel,
    pub student: Denoiser,
    pub log: Vec<RunRecord>,
    pub lr_halvings: u32,
}

/// Student and generator networks at the start of a run.
pub fn initial_networks(init: &Denoiser, cfg: &DistillConfig, rng: &mut RngState) -> Result<(GeneratorModel, Denoiser)> {
    match cfg.init {
        InitMode::CopyTeacher => Ok((GeneratorModel::new(init.clone(), cfg.sigma_init), init.clone())),
        InitMode::Random => {
            let fresh = |rng: &mut RngState| -> Result<Denoiser> {
                let net = crate::numerics::Mlp::new(
                    init.net().widths(),
                    init.net().conditioning_dim(),
                    init.net().activation(),
                    rng,
                )?;
                Denoiser::new(net, *init.spec(), init.sigma_data(), init.mean().to_vec(), init.preconditioning())
            };
            let g = fresh(&mut rng.derive(11))?;
            let s = fresh(&mut rng.derive(12))?;
            Ok((GeneratorModel::new(g, cfg.sigma_init), s))
        }
    }
}

/// Alternate student and generator updates until the generator-sample budget is spent.
///
/// `init` seeds both networks; with a network teacher pass the teacher itself.
/// If `init` is `None` the teacher must be a network.
pub fn distill(
    teacher: &TeacherModel,
    init: Option<&Denoiser>,
    cfg: &DistillConfig,
    probe: Option<&EvalProbe>,
    seed: u64,
) -> Result<DistillOutcome> {
    cfg.validate()?;
    let base = match (init, teacher) {
        (Some(d), _) => d,
        (None, TeacherModel::Network(d)) => d,
        (None, TeacherModel::Oracle { .. }) => {
            return Err(Error::config(
                "an analytic teacher has no weights to copy; supply an initialization network",
            ))
        }
    };
    if base.spec() != teacher.spec() {
        return Err(Error::config("initialization network and teacher disagree on (N, D)"));
    }
    let root = RngState::new(seed);
    let (mut generator, mut student) = initial_networks(base, cfg, &mut root.derive(1))?;
    let mut g_tr = Trainer::new(generator.net.param_count(), cfg.lr_generator);
    let mut s_tr = Trainer::new(student.param_count(), cfg.lr_student);
    let mut rng = root.derive(2);
    let total = cfg.generator_updates();
    let mut log = Vec::new();
    let mut halvings = 0;
    let mut snapshot = (generator.clone(), student.clone(), g_tr.clone(), s_tr.clone());
    let eval = |g: &GeneratorModel| -> Result<Option<f64>> {
        probe
            .map(|p| p.energy_distance(g, cfg.nfe, cfg.sigma_min_multistep))
            .transpose()
    };
    log.push(RunRecord {
        update_index: 0,
        samples_consumed: 0,
        d: teacher.spec().aux_dim,
        alpha: cfg.alpha,
        nfe: cfg.nfe,
        loss_student: f64::NAN,
        loss_generator: f64::NAN,
        energy_distance: eval(&generator)?,
        seed,
    });
    let (mut win_s, mut win_g, mut win_n) = (0.0, 0.0, 0usize);
    let mut update = 0;
    while update < total {
        let factor = cfg.lr_schedule.factor(update, total);
        let (lr_s, lr_g) = (s_tr.lr * factor, g_tr.lr * factor);
        let step = (|| -> Result<(f64, f64)> {
            let mut ls = 0.0;
            for _ in 0..cfg.student_updates_per_generator_update {
                ls = student_update(&mut student, &generator, cfg, &mut s_tr, lr_s, &mut rng)?;
            }
            let lg = generator_update(&mut generator, teacher, &student, cfg, &mut g_tr, lr_g, &mut rng)?;
            Ok((ls, lg.loss))
        })();
        match step {
            Ok((ls, lg)) => {
                win_s += ls;
                win_g += lg;
                win_n += 1;
                update += 1;
            }
            Err(Error::Training { message, diagnostics }) => {
                halvings += 1;
                log::warn!("update {update}: {message} {diagnostics:?}; restoring snapshot and halving learning rates");
                if halvings > cfg.max_lr_halvings {
                    return Err(Error::Training { message, diagnostics });
                }
                let (g, s, gt, st) = snapshot.clone();
                generator = g;
                student = s;
                g_tr = gt;
                s_tr = st;
                g_tr.lr *= 0.5;
                s_tr.lr *= 0.5;
                update = log.last().map_or(0, |r| r.update_index);
                win_s = 0.0;
                win_g = 0.0;
                win_n = 0;
                // snapshots keep the halved rates
                snapshot.2.lr = g_tr.lr;
                snapshot.3.lr = s_tr.lr;
                continue;
            }
            Err(e) => return Err(e),
        }
        if update % cfg.eval_every == 0 || update == total {
            let n = win_n.max(1) as f64;
            log.push(RunRecord {
                update_index: update,
                samples_consumed: update * cfg.batch,
                d: teacher.spec().aux_dim,
                alpha: cfg.alpha,
                nfe: cfg.nfe,
                loss_student: win_s / n,
                loss_generator: win_g / n,
                energy_distance: eval(&generator)?,
                seed,
            });
            win_s = 0.0;
            win_g = 0.0;
            win_n = 0;
            snapshot = (generator.clone(), student.clone(), g_tr.clone(), s_tr.clone());
        }
    }
    Ok(DistillOutcome {
        generator,
        student,
        log,
        lr_halvings: halvings,
    })
}

/// First logged update index whose energy distance is at or below `threshold`.
pub fn updates_to_threshold(log: &[RunRecord], threshold: f64) -> Option<usize> {
    log.iter()
        .find(|r| r.energy_distance.is_some_and(|e| e <= threshold))
        .map(|r| r.update_index)
}

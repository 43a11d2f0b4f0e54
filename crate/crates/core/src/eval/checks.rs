//! Fast self-checks behind the `check` command.

use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use statrs::function::beta::beta_reg;

use crate::denoiser::Denoiser;
use crate::error::Result;
use crate::eval::metrics::{energy_distance, ks_statistic, sliced_w2};
use crate::ipfm::{
    check_alpha_half_equivalence, generator_loss_and_grad, generator_loss_per_sample, sid_generator_loss_per_sample,
    DistillConfig, GeneratorModel, GeneratorWeight, Triple,
};
use crate::kernel::{radial_sample, sample_displacement, AuxDim, DimSpec};
use crate::numerics::{dist_sq, Activation, RngState};
use crate::teacher::TeacherModel;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub statistic: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl CheckOutcome {
    fn below(name: impl Into<String>, statistic: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            statistic,
            tolerance,
            passed: statistic < tolerance,
        }
    }
}

fn random_triples(n: usize, dim: usize, rng: &mut RngState) -> (Vec<Triple>, Vec<f64>) {
    let triples = (0..n)
        .map(|_| {
            let s = (4.0 * rng.uniform() - 2.0).exp();
            let v = |rng: &mut RngState| rng.normal_vec(dim).into_iter().map(|x| s * x).collect::<Vec<f64>>();
            (v(rng), v(rng), v(rng))
        })
        .collect();
    let lambdas = (0..n).map(|_| (4.0 * rng.uniform() - 2.0).exp()).collect();
    (triples, lambdas)
}

/// Largest relative residual of `A - B = 2 sid - |ŷ_t - ŷ_s|²` over the triples.
pub fn score_identity_residual(triples: &[Triple]) -> Result<f64> {
    let mut worst = 0.0f64;
    for (t, s, y) in triples {
        let lhs = generator_loss_per_sample(t, s, y, 0.5, 1.0)?;
        let rhs = 2.0 * sid_generator_loss_per_sample(t, s, y, 1.0)? - dist_sq(t, s);
        let scale = dist_sq(t, y) + dist_sq(s, y) + dist_sq(t, s);
        worst = worst.max((lhs - rhs).abs() / scale.max(f64::MIN_POSITIVE));
    }
    Ok(worst)
}

/// KS distance of sampled radii against `P(R <= ρ) = I_{ρ²/(ρ² + r²)}(N/2, D/2)`.
pub fn radius_ks(spec: &DimSpec, sigma: f64, n: usize, rng: &mut RngState) -> Result<f64> {
    let r = spec.radius(sigma).expect("finite D");
    let d = spec.aux_dim.finite().expect("finite D") as f64;
    let half_n = spec.data_dim as f64 / 2.0;
    let mut radii = (0..n).map(|_| radial_sample(spec, sigma, rng)).collect::<Result<Vec<_>>>()?;
    Ok(ks_statistic(&mut radii, |rho| {
        let q = rho * rho;
        beta_reg(half_n, d / 2.0, q / (q + r * r))
    }))
}

/// KS distance of `|x - y|/σ` at large D against the chi law with N degrees of freedom.
pub fn gaussian_limit_ks(data_dim: usize, aux: u64, n: usize, rng: &mut RngState) -> Result<f64> {
    let spec = DimSpec::finite(data_dim, aux)?;
    let sigma = 0.7;
    let chi2 = ChiSquared::new(data_dim as f64).expect("positive dof");
    let mut vals = (0..n)
        .map(|_| Ok(sample_displacement(&spec, sigma, rng)?.iter().map(|v| v * v).sum::<f64>().sqrt() / sigma))
        .collect::<Result<Vec<f64>>>()?;
    Ok(ks_statistic(&mut vals, |t| chi2.cdf(t * t)))
}

/// Relative error of the composite generator gradient against central differences.
pub fn generator_gradient_error(teacher: &TeacherModel, student: &Denoiser, generator: &GeneratorModel, alpha: f64, rng: &mut RngState) -> Result<f64> {
    let spec = *generator.spec();
    // λ is a stop-gradient constant, which differencing would not respect
    let cfg = DistillConfig {
        alpha,
        generator_weight: GeneratorWeight::Unit,
        ..Default::default()
    };
    let b = 4;
    let inputs = (0..b).map(|_| generator.prior_draw(rng)).collect::<Result<Vec<_>>>()?;
    let conds = vec![generator.sigma_init; b];
    let sigmas: Vec<f64> = (0..b).map(|_| 0.3 + 1.5 * rng.uniform()).collect();
    let disp = sigmas
        .iter()
        .map(|&s| sample_displacement(&spec, s, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut grad = vec![0.0; generator.net.param_count()];
    generator_loss_and_grad(generator, teacher, student, &inputs, &conds, &sigmas, &disp, &cfg, &mut grad)?;
    let mut g = generator.clone();
    let mut scratch = vec![0.0; grad.len()];
    let mut num = 0.0f64;
    let mut den = 0.0f64;
    let h = 1e-6;
    for i in 0..grad.len() {
        let p = g.net.params()[i];
        g.net.params_mut()[i] = p + h;
        let up = generator_loss_and_grad(&g, teacher, student, &inputs, &conds, &sigmas, &disp, &cfg, &mut scratch)?.loss;
        g.net.params_mut()[i] = p - h;
        let dn = generator_loss_and_grad(&g, teacher, student, &inputs, &conds, &sigmas, &disp, &cfg, &mut scratch)?.loss;
        g.net.params_mut()[i] = p;
        let fd = (up - dn) / (2.0 * h);
        num = num.max((fd - grad[i]).abs());
        den = den.max(fd.abs().max(grad[i].abs()));
    }
    Ok(num / den.max(1e-300))
}

/// Tiny networks for gradient checks: generator, student and a network teacher.
pub fn tiny_models(spec: DimSpec, rng: &mut RngState) -> Result<(GeneratorModel, Denoiser, Denoiser)> {
    let mk = |rng: &mut RngState| Denoiser::init(spec, &[4], Activation::Tanh, 1.0, vec![0.0; spec.data_dim], rng);
    let g = mk(rng)?;
    let s = mk(rng)?;
    let t = mk(rng)?;
    Ok((GeneratorModel::new(g, 2.5), s, t))
}

/// The full check list.
pub fn run_checks(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = RngState::with_stream(seed, 0xc4ec);
    let mut out = Vec::new();

    let (triples, lambdas) = random_triples(10_000, 2, &mut rng);
    out.push(CheckOutcome::below("score_identity", score_identity_residual(&triples)?, 1e-10));
    out.push(CheckOutcome::below(
        "alpha_half_equivalence",
        check_alpha_half_equivalence(&triples, &lambdas)?,
        1e-10,
    ));

    for n in [1usize, 2, 3] {
        for d in [1u64, 2, 8, 64, 2048] {
            let spec = DimSpec::finite(n, d)?;
            let ks = radius_ks(&spec, 0.8, 100_000, &mut rng)?;
            out.push(CheckOutcome::below(format!("kernel_radius_ks N={n} D={d}"), ks, 0.01));
        }
    }
    for n in [1usize, 2, 3] {
        out.push(CheckOutcome::below(
            format!("gaussian_limit_ks N={n}"),
            gaussian_limit_ks(n, 1_000_000, 100_000, &mut rng)?,
            0.01,
        ));
    }

    let a: Vec<Vec<f64>> = (0..300).map(|_| rng.normal_vec(2)).collect();
    let mut b = a.clone();
    b.reverse();
    let same = energy_distance(&a, &b)? + sliced_w2(&a, &b, 16, &mut rng)?;
    out.push(CheckOutcome::below("metrics_zero_on_identical", same, f64::MIN_POSITIVE));
    let ed = energy_distance(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]])?;
    out.push(CheckOutcome::below("metrics_point_mass", (ed - 10.0).abs(), 1e-12));

    for aux in [AuxDim::Infinite, AuxDim::Finite(4)] {
        let spec = DimSpec::new(2, aux)?;
        let (g, s, t) = tiny_models(spec, &mut rng)?;
        let net = TeacherModel::Network(t);
        out.push(CheckOutcome::below(
            format!("generator_gradient_network D={aux}"),
            generator_gradient_error(&net, &s, &g, 1.0, &mut rng)?,
            1e-3,
        ));
        let charges = crate::field::ChargeSet::uniform((0..5).map(|_| rng.normal_vec(2)).collect())?;
        let oracle = TeacherModel::oracle(charges, spec)?;
        out.push(CheckOutcome::below(
            format!("generator_gradient_oracle D={aux}"),
            generator_gradient_error(&oracle, &s, &g, 0.0, &mut rng)?,
            1e-3,
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        let res = run_checks(1).unwrap();
        for c in &res {
            assert!(c.passed, "{} = {:e} (tol {:e})", c.name, c.statistic, c.tolerance);
        }
        assert_eq!(res.len(), 2 + 15 + 3 + 2 + 4);
    }
}

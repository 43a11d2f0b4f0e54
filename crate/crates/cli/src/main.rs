//! `ipfm`: train teachers, distill generators, sample and evaluate.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use ipfm_core::denoiser::Denoiser;
use ipfm_core::eval::checks::run_checks;
use ipfm_core::eval::experiment::{
    load_dataset, make_probe, obtain_teacher, read_summary_csv, run_experiment, write_summary_csv, ExperimentConfig,
    SummaryRow,
};
use ipfm_core::eval::metric_report;
use ipfm_core::io::{read_samples_csv, write_json, write_jsonl, write_samples_csv};
use ipfm_core::ipfm::{distill, DistillConfig, GeneratorModel};
use ipfm_core::kernel::{AuxDim, DimSpec};
use ipfm_core::teacher::{ode_sample, oracle_mse, OdeMethod, TeacherModel};
use ipfm_core::RngState;

#[derive(Parser)]
#[command(name = "ipfm", version, about = "Electrostatic generative models and one-step distillation on toy data")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args)]
struct Common {
    /// TOML config file; flags below override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set distill.lr_generator=2e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Output directory (relative paths are rooted at $IPFM_OUTPUT_ROOT when set).
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Identity, kernel-law, metric and gradient self-checks.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train a network teacher for one auxiliary dimension.
    TrainTeacher {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        aux_dim: Option<AuxDim>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Integrate the teacher ODE from the prior.
    SampleTeacher {
        /// Teacher checkpoint; omit with --oracle.
        #[arg(long, required_unless_present = "oracle")]
        teacher: Option<PathBuf>,
        /// Use the exact posterior-mean denoiser of the configured dataset.
        #[arg(long)]
        oracle: bool,
        #[arg(long)]
        aux_dim: Option<AuxDim>,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Karras grid points; NFE = 2 (K - 1) - 1.
        #[arg(long)]
        grid_points: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill a teacher checkpoint into a generator.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        nfe: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for generator.ckpt, runlog.jsonl, samples.csv and metrics.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw samples from a generator checkpoint.
    SampleGenerator {
        #[arg(long)]
        generator: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        nfe: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a samples CSV with a reference CSV or the configured dataset.
    Eval {
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the full (seed, D, alpha, nfe) study grid.
    Matrix {
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Aggregate a summary CSV over seeds.
    Report {
        /// Defaults to summary.csv in the output directory.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>> {
    sets.iter()
        .map(|s| {
            let (k, v) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
            Ok((k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn toml_str(s: &str) -> String {
    format!("{s:?}")
}

fn aux_list(d: AuxDim) -> String {
    match d {
        AuxDim::Finite(v) => format!("[{v}]"),
        AuxDim::Infinite => "[\"inf\"]".into(),
    }
}

/// Config from file, `--set` pairs, then dedicated flags.
fn load_config(common: &Common, flags: Vec<(&str, String)>) -> Result<ExperimentConfig> {
    let mut overrides = parse_sets(&common.set)?;
    if let Some(o) = &common.output_dir {
        overrides.push(("output_dir".into(), toml_str(&o.to_string_lossy())));
    }
    overrides.extend(flags.into_iter().map(|(k, v)| (k.to_string(), v)));
    Ok(ExperimentConfig::load(common.config.as_deref(), &overrides)?)
}

fn single_aux(cfg: &ExperimentConfig) -> Result<AuxDim> {
    match cfg.aux_dims.as_slice() {
        [d] => Ok(*d),
        _ => bail!("this command needs exactly one auxiliary dimension; pass --aux-dim"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let Cli { common, command } = cli;
    match command {
        Command::Check { seed } => {
            // unused here, but a malformed config should still be reported
            load_config(&common, Vec::new())?;
            let res = run_checks(seed)?;
            let mut failed = 0;
            for c in &res {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("{tag} {} statistic={:.3e} tolerance={:.1e}", c.name, c.statistic, c.tolerance);
                failed += !c.passed as usize;
            }
            println!("{} checks, {failed} failed", res.len());
            Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::TrainTeacher {
            dataset,
            aux_dim,
            steps,
            seed,
        } => {
            let mut flags = Vec::new();
            if let Some(d) = dataset {
                flags.push(("dataset", toml_str(&d)));
            }
            if let Some(d) = aux_dim {
                flags.push(("aux_dims", aux_list(d)));
            }
            if let Some(s) = steps {
                flags.push(("teacher.steps", s.to_string()));
            }
            if let Some(s) = seed {
                flags.push(("teacher_seed", s.to_string()));
            }
            let mut cfg = load_config(&common, flags)?;
            cfg.reuse_teachers = false;
            let d = single_aux(&cfg)?;
            let data = load_dataset(&cfg.dataset, cfg.n_data, cfg.data_seed)?;
            let spec = DimSpec::new(data.dim(), d)?;
            let root = cfg.resolved_output_dir();
            let den = obtain_teacher(&cfg, &data, spec, &root)?;
            let mse = oracle_mse(&den, &data, &cfg.teacher.sigma_sampler, 2000, &mut RngState::new(cfg.teacher_seed ^ 1))?;
            println!(
                "teacher D={d} written to {} (oracle MSE {mse:.4e})",
                root.join("teachers").join(format!("D{d}.ckpt")).display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::SampleTeacher {
            teacher,
            oracle,
            aux_dim,
            n,
            grid_points,
            seed,
            out,
        } => {
            let mut flags = Vec::new();
            if let Some(d) = aux_dim {
                flags.push(("aux_dims", aux_list(d)));
            }
            if let Some(k) = grid_points {
                flags.push(("eval.ode_grid_points", k.to_string()));
            }
            let cfg = load_config(&common, flags)?;
            let model = match (teacher, oracle) {
                (Some(p), false) => TeacherModel::Network(Denoiser::load(&p).with_context(|| format!("loading {}", p.display()))?),
                (None, true) => {
                    let data = load_dataset(&cfg.dataset, cfg.n_data, cfg.data_seed)?;
                    let spec = DimSpec::new(data.dim(), single_aux(&cfg)?)?;
                    TeacherModel::oracle(data, spec)?
                }
                _ => bail!("pass exactly one of --teacher or --oracle"),
            };
            let grid = cfg.distill.schedule().karras_grid(cfg.eval.ode_grid_points)?;
            let res = ode_sample(&model, &grid, n, OdeMethod::Heun, &mut RngState::new(seed))?;
            write_samples_csv(&out, &res.samples)?;
            println!("{n} samples at NFE {} written to {}", res.nfe, out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Distill {
            teacher,
            alpha,
            nfe,
            budget,
            seed,
            out,
        } => {
            let mut flags = Vec::new();
            if let Some(a) = alpha {
                flags.push(("distill.alpha", a.to_string()));
            }
            if let Some(n) = nfe {
                flags.push(("distill.nfe", n.to_string()));
            }
            if let Some(b) = budget {
                flags.push(("distill.budget", b.to_string()));
            }
            let cfg = load_config(&common, flags)?;
            let den = Denoiser::load(&teacher).with_context(|| format!("loading {}", teacher.display()))?;
            let data = load_dataset(&cfg.dataset, cfg.n_data, cfg.data_seed)?;
            if data.dim() != den.spec().data_dim {
                bail!("dataset dimension {} does not match the teacher's {}", data.dim(), den.spec().data_dim);
            }
            let probe = make_probe(&data, cfg.eval.probe_samples, seed);
            let dcfg: DistillConfig = cfg.distill.clone();
            let res = distill(&TeacherModel::Network(den), None, &dcfg, Some(&probe), seed)?;
            let out = ipfm_core::eval::experiment::resolve_output(&out);
            res.generator.save(out.join("generator.ckpt"))?;
            write_jsonl(&out.join("runlog.jsonl"), &res.log)?;
            let (rep, samples) = ipfm_core::eval::experiment::evaluate_generator(
                &res.generator,
                dcfg.nfe,
                dcfg.sigma_min_multistep,
                &data,
                &cfg.eval,
                seed ^ 0x5eed_e7a1,
            )?;
            write_samples_csv(&out.join("samples.csv"), &samples)?;
            write_json(&out.join("metrics.json"), &rep)?;
            println!(
                "generator written to {} (energy distance {:.4e}, {} lr halvings)",
                out.display(),
                rep.energy_distance,
                res.lr_halvings
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::SampleGenerator {
            generator,
            n,
            nfe,
            seed,
            out,
        } => {
            let cfg = load_config(&common, Vec::new())?;
            let g = GeneratorModel::load(&generator).with_context(|| format!("loading {}", generator.display()))?;
            let s = g.generate_multistep(n, nfe, cfg.distill.sigma_min_multistep, &mut RngState::new(seed))?;
            write_samples_csv(&out, &s)?;
            println!("{n} samples written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            samples,
            reference,
            seed,
            out,
        } => {
            let cfg = load_config(&common, Vec::new())?;
            let gen = read_samples_csv(&samples)?;
            let reference = match reference {
                Some(p) => read_samples_csv(&p)?,
                None => {
                    let data = load_dataset(&cfg.dataset, cfg.n_data, cfg.data_seed)?;
                    let mut rng = RngState::with_stream(seed, 0xe0a2);
                    (0..gen.len()).map(|_| data.sample(&mut rng).to_vec()).collect()
                }
            };
            let rep = metric_report(&gen, &reference, cfg.eval.projections, &mut RngState::new(seed))?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
            if let Some(o) = out {
                write_json(&o, &rep)?;
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Matrix { seeds } => {
            let mut flags = Vec::new();
            if let Some(s) = seeds {
                let list: Vec<String> = s.iter().map(u64::to_string).collect();
                flags.push(("seeds", format!("[{}]", list.join(", "))));
            }
            let cfg = load_config(&common, flags)?;
            let summary = run_experiment(&cfg)?;
            println!(
                "{} rows written to {} ({} failed)",
                summary.rows.len(),
                summary.output_dir.join("summary.csv").display(),
                summary.failures()
            );
            Ok(if summary.failures() == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
        Command::Report { summary } => {
            let cfg = load_config(&common, Vec::new())?;
            let path = summary.unwrap_or_else(|| cfg.resolved_output_dir().join("summary.csv"));
            let rows = read_summary_csv(&path).with_context(|| format!("reading {}", path.display()))?;
            let agg = aggregate(&rows);
            let out = path.with_file_name("report.csv");
            write_summary_csv(&out, &agg)?;
            println!("kind         D      alpha  nfe  seeds  energy_distance  initial  updates_to_threshold");
            for r in &agg {
                println!(
                    "{:<12} {:<6} {:<6} {:<4} {:<6} {:<16} {:<8} {}",
                    r.kind,
                    r.d,
                    r.alpha.map_or("-".into(), |a| a.to_string()),
                    r.nfe,
                    r.status,
                    fmt_opt(r.energy_distance),
                    fmt_opt(r.initial_energy_distance),
                    r.updates_to_threshold.map_or("-".into(), |u| u.to_string())
                );
            }
            println!("medians written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.4e}"))
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// Median over seeds per `(kind, D, alpha, nfe)`; `status` holds the ok-row count.
fn aggregate(rows: &[SummaryRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, String, usize), Vec<&SummaryRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.kind.clone(), r.d.clone(), r.alpha.map_or(String::new(), |a| a.to_string()), r.nfe);
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let ok: Vec<&SummaryRow> = g.iter().copied().filter(|r| r.status == "ok").collect();
            let med = |f: &dyn Fn(&SummaryRow) -> Option<f64>| median(ok.iter().filter_map(|r| f(r)).collect());
            SummaryRow {
                kind: g[0].kind.clone(),
                d: g[0].d.clone(),
                alpha: g[0].alpha,
                nfe: g[0].nfe,
                seed: None,
                status: ok.len().to_string(),
                energy_distance: med(&|r| r.energy_distance),
                sliced_w2: med(&|r| r.sliced_w2),
                initial_energy_distance: med(&|r| r.initial_energy_distance),
                updates_to_threshold: med(&|r| r.updates_to_threshold.map(|u| u as f64)).map(|m| m.round() as usize),
                lr_halvings: None,
            }
        })
        .collect()
}

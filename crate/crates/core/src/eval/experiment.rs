//! Study-matrix orchestration: teachers per auxiliary dimension, one distillation
//! per `(seed, D, alpha, nfe)` cell, and the artifacts each stage leaves on disk.
//!
//! Layout under the output directory:
//!
//! ```text
//! teachers/D{d}.ckpt, teachers/D{d}.json
//! baseline/D{d}/samples.csv, metrics.json
//! cells/D{d}_a{alpha}_nfe{n}_s{seed}/samples.csv, runlog.jsonl, metrics.json, generator.ckpt
//! summary.csv
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::eval::datasets::builtin_dataset;
use crate::eval::metrics::{metric_report, MetricReport};
use crate::field::ChargeSet;
use crate::io::{write_atomic, write_json, write_jsonl, write_samples_csv};
use crate::ipfm::{distill, updates_to_threshold, DistillConfig, EvalProbe, GeneratorModel, RunRecord};
use crate::kernel::{AuxDim, DimSpec};
use crate::numerics::RngState;
use crate::teacher::{ode_sample, train_denoiser, OdeMethod, TeacherConfig, TeacherModel};

/// Environment variable that, when set, roots relative output directories.
pub const OUTPUT_ROOT_ENV: &str = "IPFM_OUTPUT_ROOT";

/// How generated samples are scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalProtocol {
    /// Generated and reference samples per evaluation.
    pub samples: usize,
    /// Independent evaluations; the one with the smallest energy distance is reported.
    pub repeats: usize,
    pub projections: usize,
    /// Sample count for the in-run energy-distance probe.
    pub probe_samples: usize,
    /// Energy distance that counts as "converged" for the updates-to-threshold column.
    pub threshold: f64,
    /// Grid points of the teacher-ODE baseline (NFE = 2 (K - 1) - 1).
    pub ode_grid_points: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            samples: 10_000,
            repeats: 3,
            projections: 64,
            probe_samples: 1000,
            threshold: 0.1,
            ode_grid_points: 19,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Built-in dataset name or path to a charge-set CSV.
    pub dataset: String,
    pub n_data: usize,
    pub data_seed: u64,
    pub aux_dims: Vec<AuxDim>,
    pub alphas: Vec<f64>,
    pub nfes: Vec<usize>,
    pub seeds: Vec<u64>,
    pub teacher_seed: u64,
    /// Reuse a teacher checkpoint when its recorded settings match.
    pub reuse_teachers: bool,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub eval: EvalProtocol,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "eight_gaussians".into(),
            n_data: 10_000,
            data_seed: 100,
            aux_dims: vec![AuxDim::Finite(2), AuxDim::Finite(16), AuxDim::Finite(128), AuxDim::Infinite],
            alphas: vec![0.0, 1.0],
            nfes: vec![1],
            seeds: vec![0],
            teacher_seed: 7,
            reuse_teachers: true,
            teacher: TeacherConfig {
                hidden: vec![128, 128],
                steps: 3000,
                ..TeacherConfig::default()
            },
            distill: DistillConfig {
                t_max: 0.6,
                ..DistillConfig::default()
            },
            eval: EvalProtocol::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

/// Parse a scalar override: TOML literal if it parses, bare string otherwise.
fn override_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).ok_or_else(|| Error::config("empty override key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parse TOML text, then apply `key=value` overrides (dotted keys reach nested tables).
    pub fn from_toml_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config(format!("config: {e}")))?;
        for (k, v) in overrides {
            set_path(&mut table, k, override_value(v))?;
        }
        let cfg: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::config("seed list is empty"));
        }
        if self.aux_dims.is_empty() || self.alphas.is_empty() || self.nfes.is_empty() {
            return Err(Error::config("aux_dims, alphas and nfes must be nonempty"));
        }
        if self.n_data == 0 {
            return Err(Error::config("n_data must be >= 1"));
        }
        if self.eval.samples == 0 || self.eval.repeats == 0 || self.eval.probe_samples == 0 {
            return Err(Error::config("evaluation sample counts must be >= 1"));
        }
        if !is_builtin(&self.dataset) && !Path::new(&self.dataset).is_file() {
            return Err(Error::config(format!("dataset {:?} is neither built in nor a file", self.dataset)));
        }
        self.teacher.validate()?;
        self.distill.validate()?;
        for &n in &self.nfes {
            DistillConfig { nfe: n, ..self.distill.clone() }.validate()?;
        }
        Ok(())
    }

    /// Output directory, rooted at `$IPFM_OUTPUT_ROOT` when relative and the variable is set.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }

    /// Number of distillation cells.
    pub fn cell_count(&self) -> usize {
        self.seeds.len() * self.aux_dims.len() * self.alphas.len() * self.nfes.len()
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() && !root.is_empty() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

fn is_builtin(name: &str) -> bool {
    name.parse::<crate::eval::Builtin>().is_ok()
}

/// Built-in dataset or charge-set CSV named by `dataset`.
pub fn load_dataset(dataset: &str, n_data: usize, seed: u64) -> Result<ChargeSet> {
    if is_builtin(dataset) {
        builtin_dataset(dataset, n_data, &mut RngState::with_stream(seed, 0xda7a))
    } else {
        ChargeSet::from_csv_path(dataset, None)
    }
}

/// Score samples from `sample` against bootstrap draws of `data`.
///
/// Runs `protocol.repeats` independent evaluations and keeps the one with the
/// smallest energy distance; also returns the first repeat's samples.
pub fn evaluate<F>(
    mut sample: F,
    data: &ChargeSet,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<(MetricReport, Vec<Vec<f64>>)>
where
    F: FnMut(usize, &mut RngState) -> Result<Vec<Vec<f64>>>,
{
    let mut best: Option<MetricReport> = None;
    let mut first = None;
    for r in 0..protocol.repeats as u64 {
        let mut gen_rng = RngState::at(seed, 0xe0a1, r);
        let mut ref_rng = RngState::at(seed, 0xe0a2, r);
        let gen = sample(protocol.samples, &mut gen_rng)?;
        let reference: Vec<Vec<f64>> = (0..protocol.samples).map(|_| data.sample(&mut ref_rng).to_vec()).collect();
        let rep = metric_report(&gen, &reference, protocol.projections, &mut RngState::at(seed, 0xe0a3, r))?;
        if best.as_ref().is_none_or(|b| rep.energy_distance < b.energy_distance) {
            best = Some(rep);
        }
        if first.is_none() {
            first = Some(gen);
        }
    }
    Ok((best.expect("at least one repeat"), first.expect("at least one repeat")))
}

/// Score a generator's `nfe`-step samples.
pub fn evaluate_generator(
    generator: &GeneratorModel,
    nfe: usize,
    sigma_min: f64,
    data: &ChargeSet,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<(MetricReport, Vec<Vec<f64>>)> {
    evaluate(|n, rng| generator.generate_multistep(n, nfe, sigma_min, rng), data, protocol, seed)
}

/// Score teacher-ODE samples on the Karras grid.
pub fn evaluate_teacher_ode(
    teacher: &TeacherModel,
    schedule: &crate::kernel::NoiseSchedule,
    data: &ChargeSet,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<(MetricReport, Vec<Vec<f64>>)> {
    let grid = schedule.karras_grid(protocol.ode_grid_points)?;
    evaluate(|n, rng| Ok(ode_sample(teacher, &grid, n, OdeMethod::Heun, rng)?.samples), data, protocol, seed)
}

/// In-run probe: fixed reference draws and generator noise.
pub fn make_probe(data: &ChargeSet, n: usize, seed: u64) -> EvalProbe {
    let mut rng = RngState::with_stream(seed, 0x9b0e);
    EvalProbe {
        reference: (0..n).map(|_| data.sample(&mut rng).to_vec()).collect(),
        n_generated: n,
        seed,
    }
}

/// One row of the summary table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// `distill` or `teacher_ode`.
    pub kind: String,
    #[serde(rename = "D")]
    pub d: String,
    pub alpha: Option<f64>,
    pub nfe: usize,
    pub seed: Option<u64>,
    /// `ok` or the failure message.
    pub status: String,
    pub energy_distance: Option<f64>,
    pub sliced_w2: Option<f64>,
    pub initial_energy_distance: Option<f64>,
    pub updates_to_threshold: Option<usize>,
    pub lr_halvings: Option<u32>,
}

impl SummaryRow {
    fn failed(kind: &str, d: AuxDim, alpha: Option<f64>, nfe: usize, seed: Option<u64>, e: &Error) -> Self {
        Self {
            kind: kind.into(),
            d: d.to_string(),
            alpha,
            nfe,
            seed,
            status: format!("error: {e}").replace(['\n', ','], " "),
            energy_distance: None,
            sliced_w2: None,
            initial_energy_distance: None,
            updates_to_threshold: None,
            lr_halvings: None,
        }
    }
}

pub fn write_summary_csv(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_summary_csv(path: &Path) -> Result<Vec<SummaryRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

fn d_tag(d: AuxDim) -> String {
    format!("D{d}")
}

pub fn cell_dir(root: &Path, d: AuxDim, alpha: f64, nfe: usize, seed: u64) -> PathBuf {
    root.join("cells").join(format!("{}_a{alpha}_nfe{nfe}_s{seed}", d_tag(d)))
}

#[derive(Serialize, Deserialize, PartialEq)]
struct TeacherStamp {
    dataset: String,
    n_data: usize,
    data_seed: u64,
    teacher_seed: u64,
    spec: DimSpec,
    teacher: TeacherConfig,
}

/// Train the network teacher for `spec`, or reuse a matching checkpoint under `root`.
pub fn obtain_teacher(cfg: &ExperimentConfig, data: &ChargeSet, spec: DimSpec, root: &Path) -> Result<Denoiser> {
    let ckpt = root.join("teachers").join(format!("{}.ckpt", d_tag(spec.aux_dim)));
    let stamp_path = ckpt.with_extension("json");
    let stamp = TeacherStamp {
        dataset: cfg.dataset.clone(),
        n_data: cfg.n_data,
        data_seed: cfg.data_seed,
        teacher_seed: cfg.teacher_seed,
        spec,
        teacher: cfg.teacher.clone(),
    };
    if cfg.reuse_teachers && ckpt.is_file() {
        let matches = std::fs::read_to_string(&stamp_path)
            .ok()
            .and_then(|s| serde_json::from_str::<TeacherStamp>(&s).ok())
            .is_some_and(|s| s == stamp);
        if matches {
            log::info!("reusing teacher {}", ckpt.display());
            return Denoiser::load(&ckpt);
        }
    }
    log::info!("training teacher for D = {}", spec.aux_dim);
    let den = train_denoiser(data, &spec, &cfg.teacher, &mut RngState::with_stream(cfg.teacher_seed, 0x7eac))?;
    den.save(&ckpt)?;
    write_json(&stamp_path, &stamp)?;
    Ok(den)
}

/// Everything one distillation cell produced.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub report: MetricReport,
    pub initial: MetricReport,
    pub log: Vec<RunRecord>,
    pub generator: GeneratorModel,
    pub lr_halvings: u32,
    pub samples: Vec<Vec<f64>>,
}

/// Distill `teacher` for one `(seed, alpha, nfe)` and score it before and after.
pub fn run_cell(
    teacher: &Denoiser,
    data: &ChargeSet,
    dcfg: &DistillConfig,
    protocol: &EvalProtocol,
    seed: u64,
) -> Result<CellResult> {
    let model = TeacherModel::Network(teacher.clone());
    let probe = make_probe(data, protocol.probe_samples, seed);
    let init = crate::ipfm::initial_networks(teacher, dcfg, &mut RngState::new(seed).derive(1))?.0;
    let eval_seed = seed ^ 0x5eed_e7a1;
    let (initial, _) = evaluate_generator(&init, dcfg.nfe, dcfg.sigma_min_multistep, data, protocol, eval_seed)?;
    let out = distill(&model, None, dcfg, Some(&probe), seed)?;
    let (report, samples) =
        evaluate_generator(&out.generator, dcfg.nfe, dcfg.sigma_min_multistep, data, protocol, eval_seed)?;
    Ok(CellResult {
        report,
        initial,
        log: out.log,
        generator: out.generator,
        lr_halvings: out.lr_halvings,
        samples,
    })
}

#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    pub output_dir: PathBuf,
    pub rows: Vec<SummaryRow>,
}

impl ExperimentSummary {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| r.status != "ok").count()
    }
}

/// Run every cell of the study matrix and write all artifacts.
///
/// Stage failures are recorded in the summary and the run moves on.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    let root = cfg.resolved_output_dir();
    std::fs::create_dir_all(&root)?;
    write_atomic(&root.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    let data = load_dataset(&cfg.dataset, cfg.n_data, cfg.data_seed)?;
    let mut rows = Vec::new();
    for &d in &cfg.aux_dims {
        let spec = DimSpec::new(data.dim(), d)?;
        let teacher = match obtain_teacher(cfg, &data, spec, &root) {
            Ok(t) => t,
            Err(e) => {
                log::error!("teacher for D = {d} failed: {e}");
                rows.push(SummaryRow::failed("teacher_ode", d, None, 0, None, &e));
                for &seed in &cfg.seeds {
                    for &alpha in &cfg.alphas {
                        for &nfe in &cfg.nfes {
                            rows.push(SummaryRow::failed("distill", d, Some(alpha), nfe, Some(seed), &e));
                        }
                    }
                }
                continue;
            }
        };
        rows.push(baseline_row(cfg, &data, &teacher, &root).unwrap_or_else(|e| {
            log::error!("teacher-ODE baseline for D = {d} failed: {e}");
            SummaryRow::failed("teacher_ode", d, None, 0, None, &e)
        }));
        for &seed in &cfg.seeds {
            for &alpha in &cfg.alphas {
                for &nfe in &cfg.nfes {
                    let dcfg = DistillConfig {
                        alpha,
                        nfe,
                        ..cfg.distill.clone()
                    };
                    log::info!("cell D = {d}, alpha = {alpha}, nfe = {nfe}, seed = {seed}");
                    let dir = cell_dir(&root, d, alpha, nfe, seed);
                    let row = run_cell(&teacher, &data, &dcfg, &cfg.eval, seed)
                        .and_then(|c| {
                            write_samples_csv(&dir.join("samples.csv"), &c.samples)?;
                            write_jsonl(&dir.join("runlog.jsonl"), &c.log)?;
                            write_json(&dir.join("metrics.json"), &c.report)?;
                            c.generator.save(dir.join("generator.ckpt"))?;
                            Ok(SummaryRow {
                                kind: "distill".into(),
                                d: d.to_string(),
                                alpha: Some(alpha),
                                nfe,
                                seed: Some(seed),
                                status: "ok".into(),
                                energy_distance: Some(c.report.energy_distance),
                                sliced_w2: Some(c.report.sliced_w2),
                                initial_energy_distance: Some(c.initial.energy_distance),
                                updates_to_threshold: updates_to_threshold(&c.log, cfg.eval.threshold),
                                lr_halvings: Some(c.lr_halvings),
                            })
                        })
                        .unwrap_or_else(|e| {
                            log::error!("cell failed: {e}");
                            SummaryRow::failed("distill", d, Some(alpha), nfe, Some(seed), &e)
                        });
                    rows.push(row);
                }
            }
        }
    }
    write_summary_csv(&root.join("summary.csv"), &rows)?;
    Ok(ExperimentSummary { output_dir: root, rows })
}

fn baseline_row(cfg: &ExperimentConfig, data: &ChargeSet, teacher: &Denoiser, root: &Path) -> Result<SummaryRow> {
    let d = teacher.spec().aux_dim;
    let model = TeacherModel::Network(teacher.clone());
    let (rep, samples) = evaluate_teacher_ode(&model, &cfg.distill.schedule(), data, &cfg.eval, cfg.teacher_seed)?;
    let dir = root.join("baseline").join(d_tag(d));
    write_samples_csv(&dir.join("samples.csv"), &samples)?;
    write_json(&dir.join("metrics.json"), &rep)?;
    Ok(SummaryRow {
        kind: "teacher_ode".into(),
        d: d.to_string(),
        alpha: None,
        nfe: 2 * (cfg.eval.ode_grid_points - 1) - 1,
        seed: None,
        status: "ok".into(),
        energy_distance: Some(rep.energy_distance),
        sliced_w2: Some(rep.sliced_w2),
        initial_energy_distance: None,
        updates_to_threshold: None,
        lr_halvings: None,
    })
}

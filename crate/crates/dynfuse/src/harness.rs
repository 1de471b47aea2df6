//! Experiment runner: λ sweeps with paired static baselines, robustness
//! curves under modality noise, training-strategy ablations, and
//! per-sample decision inspection.
//!
//! One experiment is one JSON config (`schema: 1`). Every cell of a run
//! — a (variant, λ, seed) triple — owns its model, datasets, and RNG, so
//! cells can run on any number of threads (`jobs`) without changing a
//! single output bit. All result files land in `output_dir`:
//! `metrics.csv` (deterministic; no wall times), `metrics.json` (full
//! records), `log.ndjson` (per-epoch and per-cell events), `*.ckpt`
//! checkpoints, and the generated `*.dmmd` datasets.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_model;
use crate::data::{generate, inject_noise, save_dataset, Dataset, Difficulty, NoiseSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::{records_to_csv, records_to_json, MetricsRecord};
use crate::model::{Model, ModelConfig};
use crate::moe::InferencePolicy;
use crate::par::map_cells;
use crate::trainer::{
    check_compatible, evaluate, evaluate_forced, train, train_forced, Ablation, EpochLog,
    EvalReport, TaskLoss, TrainConfig,
};

/// Config documents carry an explicit schema version; this code reads 1.
pub const SCHEMA_VERSION: u32 = 1;

/// Noise robustness protocol: which corruption, at which strengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweep {
    /// Noise levels to evaluate; include 0 to anchor the curve.
    pub sigmas: Vec<f64>,
    /// Target modalities and corruption probability; `sigma` inside this
    /// spec is ignored in favor of `sigmas`.
    pub spec: NoiseSpec,
}

/// One declarative experiment: architecture, data, training recipe, and
/// the sweep axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub schema: u32,
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub train: TrainConfig,
    pub lambda_values: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_sweep: Option<NoiseSweep>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema: SCHEMA_VERSION,
            model: ModelConfig::ModalityMoe(
                crate::moe::MoeConfig::two_expert(vec![32, 32], 2)
                    .expect("static default is valid"),
            ),
            data: SyntheticSpec::default(),
            train: TrainConfig::default(),
            lambda_values: vec![0.0, 0.001, 0.01, 0.1, 1.0],
            noise_sweep: Some(NoiseSweep {
                sigmas: vec![0.0, 0.5, 1.0, 2.0, 4.0],
                spec: NoiseSpec::default(),
            }),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("dynfuse-out"),
        }
    }
}

fn model_dims(model: &ModelConfig) -> &[usize] {
    match model {
        ModelConfig::ModalityMoe(m) => &m.modality_dims,
        ModelConfig::FusionNet(f) => &f.modality_dims,
    }
}

/// Name of the always-everything static baseline, the reference that
/// `madds_reduction_vs_static` is computed against.
pub fn reference_variant(model: &ModelConfig) -> &'static str {
    match model {
        ModelConfig::ModalityMoe(_) => "static_full",
        ModelConfig::FusionNet(_) => "static_all_fuse",
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "config schema {} not supported; this build reads schema {SCHEMA_VERSION}",
                self.schema
            )));
        }
        if self.lambda_values.is_empty() {
            return Err(Error::Config("lambda_values must be non-empty".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        for &l in &self.lambda_values {
            if !l.is_finite() || l < 0.0 {
                return Err(Error::Config(format!("lambda values must be finite and >= 0, got {l}")));
            }
        }
        self.data.validate()?;
        self.train.validate()?;
        if model_dims(&self.model) != self.data.dims.as_slice() {
            return Err(Error::Config(format!(
                "model modality dims {:?} do not match dataset dims {:?}",
                model_dims(&self.model),
                self.data.dims
            )));
        }
        // Build a throwaway model to validate the architecture and its
        // compatibility with the labels before any cell spends compute.
        let probe = Model::build(&self.model)?;
        check_compatible(&probe, self.data.task, self.train.task_loss)?;
        if let Some(ns) = &self.noise_sweep {
            ns.spec.validate()?;
            if ns.sigmas.is_empty() {
                return Err(Error::Config("noise sweep needs at least one sigma".into()));
            }
            for &s in &ns.sigmas {
                if !s.is_finite() || s < 0.0 {
                    return Err(Error::Config(format!("noise sigma must be finite and >= 0, got {s}")));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// A cell that could not produce a record; sweeps continue past these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<CellFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub records: Vec<MetricsRecord>,
    pub failures: Vec<CellFailure>,
}

/// One (sigma, seed) point of a robustness curve: accuracies and drops
/// relative to each model's own clean accuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessPoint {
    pub sigma: f64,
    pub seed: u64,
    pub dyn_accuracy: f64,
    pub static_accuracy: f64,
    pub dyn_drop: f64,
    pub static_drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessOutcome {
    pub points: Vec<RobustnessPoint>,
    pub failures: Vec<CellFailure>,
}

// ---------------------------------------------------------------------------
// Shared cell plumbing
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct EpochEvent<'a> {
    event: &'static str,
    variant: &'a str,
    lambda: f64,
    seed: u64,
    #[serde(flatten)]
    log: &'a EpochLog,
}

#[derive(Serialize)]
struct CellEvent<'a> {
    event: &'static str,
    variant: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    lambda: Option<f64>,
    seed: u64,
    status: &'a str,
    wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

struct CellOutput {
    records: Vec<MetricsRecord>,
    events: Vec<String>,
}

fn ndjson_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("log events serialize")
}

fn epoch_events(variant: &str, lambda: f64, seed: u64, log: &[EpochLog]) -> Vec<String> {
    log.iter()
        .map(|l| ndjson_line(&EpochEvent { event: "epoch", variant, lambda, seed, log: l }))
        .collect()
}

/// Datasets are generated once per seed, sequentially, and shared across
/// all cells of that seed — the paired-comparison guarantee.
fn prepare_datasets(
    cfg: &ExperimentConfig,
    events: &mut Vec<String>,
) -> Result<BTreeMap<u64, Arc<(Dataset, Dataset)>>> {
    let mut out = BTreeMap::new();
    for &seed in &cfg.seeds {
        let spec = SyntheticSpec { seed, ..cfg.data.clone() };
        let (train_set, test_set) = generate(&spec)?;
        save_dataset(&train_set, cfg.output_dir.join(format!("seed{seed}_train.dmmd")))?;
        save_dataset(&test_set, cfg.output_dir.join(format!("seed{seed}_test.dmmd")))?;
        events.push(ndjson_line(&serde_json::json!({
            "event": "dataset",
            "seed": seed,
            "train": train_set.len(),
            "test": test_set.len(),
        })));
        out.insert(seed, Arc::new((train_set, test_set)));
    }
    Ok(out)
}

/// Deployment policy for a trained dynamic model: hard decisions, except
/// that a λ=0 branch-routed model is evaluated with its soft gate active
/// (every branch runs), matching the published λ=0 protocol.
fn eval_policy(model: &Model, lambda: f64) -> InferencePolicy {
    match model {
        Model::Moe(_) if lambda == 0.0 => InferencePolicy::Soft { tau: 1.0 },
        _ => InferencePolicy::Hard,
    }
}

fn train_dynamic_cell(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    data: &(Dataset, Dataset),
    lambda: f64,
    seed: u64,
    ablation: Ablation,
) -> Result<(Model, Vec<EpochLog>, EvalReport)> {
    let mut model = Model::build(model_cfg)?;
    model.init(seed);
    let cfg = TrainConfig { lambda, seed, ablation, ..base.clone() };
    let log = train(&mut model, &data.0, &cfg)?;
    let report = evaluate(&model, &data.1, eval_policy(&model, lambda), cfg.task_loss)?;
    Ok((model, log, report))
}

fn train_static_cell(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    data: &(Dataset, Dataset),
    seed: u64,
    plan: &[usize],
) -> Result<(Model, Vec<EpochLog>, EvalReport)> {
    let mut model = Model::build(model_cfg)?;
    model.init(seed);
    let cfg = TrainConfig { lambda: 0.0, seed, ..base.clone() };
    let log = train_forced(&mut model, &data.0, &cfg, plan)?;
    let report = evaluate_forced(&model, &data.1, plan, cfg.task_loss)?;
    Ok((model, log, report))
}

/// After all cells finish: compute each row's saving against the paired
/// always-everything baseline of the same seed.
fn fill_reductions(records: &mut [MetricsRecord], reference: &str) {
    let full: BTreeMap<u64, f64> = records
        .iter()
        .filter(|r| r.variant == reference)
        .map(|r| (r.seed, r.mean_madds_per_sample))
        .collect();
    for r in records.iter_mut() {
        if let Some(&s) = full.get(&r.seed) {
            if s > 0.0 {
                r.madds_reduction_vs_static = 1.0 - r.mean_madds_per_sample / s;
            }
        }
    }
}

fn write_outputs(
    dir: &Path,
    stem: &str,
    records: &[MetricsRecord],
    events: &[String],
) -> Result<()> {
    fs::write(dir.join(format!("{stem}.csv")), records_to_csv(records)?)?;
    fs::write(dir.join(format!("{stem}.json")), records_to_json(records)?)?;
    let mut log = events.join("\n");
    log.push('\n');
    fs::write(dir.join("log.ndjson"), log)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// λ sweep
// ---------------------------------------------------------------------------

enum SweepKind {
    Dynamic { lambda_idx: usize, lambda: f64 },
    StaticPair,
}

struct SweepJob {
    kind: SweepKind,
    seed: u64,
    data: Arc<(Dataset, Dataset)>,
}

/// Train and evaluate the dynamic model over every (λ, seed) cell, plus
/// one pair of static baselines per seed, all under shared data seeds.
/// Emits `metrics.csv` / `metrics.json` / `log.ndjson`, checkpoints, and
/// datasets into `output_dir`. Cell failures are recorded and skipped.
pub fn run_lambda_sweep(cfg: &ExperimentConfig, jobs: usize) -> Result<SweepOutcome> {
    cfg.validate()?;
    let ckpt_dir = cfg.output_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut events = Vec::new();
    let datasets = prepare_datasets(cfg, &mut events)?;

    let mut cells = Vec::new();
    for (li, &lambda) in cfg.lambda_values.iter().enumerate() {
        for &seed in &cfg.seeds {
            cells.push(SweepJob {
                kind: SweepKind::Dynamic { lambda_idx: li, lambda },
                seed,
                data: Arc::clone(&datasets[&seed]),
            });
        }
    }
    for &seed in &cfg.seeds {
        cells.push(SweepJob {
            kind: SweepKind::StaticPair,
            seed,
            data: Arc::clone(&datasets[&seed]),
        });
    }

    let model_cfg = cfg.model.clone();
    let base = cfg.train.clone();
    let labels = Model::build(&model_cfg)?.branch_labels();
    let outputs = map_cells(cells, jobs, |job| -> std::result::Result<CellOutput, CellFailure> {
        let seed = job.seed;
        match job.kind {
            SweepKind::Dynamic { lambda_idx, lambda } => {
                let start = Instant::now();
                let run = train_dynamic_cell(&model_cfg, &base, &job.data, lambda, seed, base.ablation)
                    .and_then(|(model, log, report)| {
                        save_model(
                            &model,
                            ckpt_dir.join(format!("sweep_lambda{lambda_idx}_seed{seed}_dynamic.ckpt")),
                        )?;
                        Ok((log, report))
                    });
                let wall = start.elapsed().as_secs_f64();
                match run {
                    Ok((log, report)) => {
                        let mut events = epoch_events("dynamic", lambda, seed, &log);
                        events.push(ndjson_line(&CellEvent {
                            event: "cell",
                            variant: "dynamic",
                            lambda: Some(lambda),
                            seed,
                            status: "ok",
                            wall_time_s: wall,
                            error: None,
                        }));
                        let record = MetricsRecord::from_eval(
                            "dynamic", lambda, seed, &report, None, wall, &labels,
                        );
                        Ok(CellOutput { records: vec![record], events })
                    }
                    Err(e) => Err(CellFailure {
                        variant: "dynamic".into(),
                        lambda: Some(lambda),
                        seed,
                        error: e.to_string(),
                    }),
                }
            }
            SweepKind::StaticPair => {
                let plans = Model::build(&model_cfg)
                    .map(|m| m.static_baselines())
                    .map_err(|e| CellFailure {
                        variant: "static".into(),
                        lambda: None,
                        seed,
                        error: e.to_string(),
                    })?;
                let mut records = Vec::new();
                let mut cell_events = Vec::new();
                for (name, plan) in plans {
                    let start = Instant::now();
                    let run = train_static_cell(&model_cfg, &base, &job.data, seed, &plan)
                        .and_then(|(model, log, report)| {
                            save_model(
                                &model,
                                ckpt_dir.join(format!("static_seed{seed}_{name}.ckpt")),
                            )?;
                            Ok((log, report))
                        });
                    let wall = start.elapsed().as_secs_f64();
                    match run {
                        Ok((log, report)) => {
                            cell_events.extend(epoch_events(name, 0.0, seed, &log));
                            cell_events.push(ndjson_line(&CellEvent {
                                event: "cell",
                                variant: name,
                                lambda: None,
                                seed,
                                status: "ok",
                                wall_time_s: wall,
                                error: None,
                            }));
                            records.push(MetricsRecord::from_eval(
                                name, 0.0, seed, &report, None, wall, &labels,
                            ));
                        }
                        Err(e) => {
                            return Err(CellFailure {
                                variant: name.into(),
                                lambda: None,
                                seed,
                                error: e.to_string(),
                            })
                        }
                    }
                }
                Ok(CellOutput { records, events: cell_events })
            }
        }
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for out in outputs {
        match out {
            Ok(cell) => {
                records.extend(cell.records);
                events.extend(cell.events);
            }
            Err(f) => {
                events.push(ndjson_line(&CellEvent {
                    event: "cell",
                    variant: &f.variant,
                    lambda: f.lambda,
                    seed: f.seed,
                    status: "failed",
                    wall_time_s: 0.0,
                    error: Some(&f.error),
                }));
                failures.push(f);
            }
        }
    }
    fill_reductions(&mut records, reference_variant(&cfg.model));
    write_outputs(&cfg.output_dir, "metrics", &records, &events)?;
    Ok(SweepOutcome { records, failures })
}

// ---------------------------------------------------------------------------
// Robustness
// ---------------------------------------------------------------------------

/// For each seed: train the dynamic model (at the config's λ) and the
/// always-everything static baseline on clean data, then evaluate both on
/// test sets corrupted at each sigma. Drops are relative to each model's
/// own clean accuracy, so sigma=0 sits at exactly zero.
pub fn run_robustness(cfg: &ExperimentConfig, jobs: usize) -> Result<RobustnessOutcome> {
    cfg.validate()?;
    let sweep = cfg
        .noise_sweep
        .clone()
        .ok_or_else(|| Error::Config("robustness run needs a noise_sweep in the config".into()))?;
    if !matches!(cfg.train.task_loss, TaskLoss::CrossEntropy | TaskLoss::BinaryCrossEntropy) {
        return Err(Error::Config(
            "robustness curves compare accuracy; use a classification task".into(),
        ));
    }
    let ckpt_dir = cfg.output_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut events = Vec::new();
    let datasets = prepare_datasets(cfg, &mut events)?;

    let cells: Vec<(u64, Arc<(Dataset, Dataset)>)> = cfg
        .seeds
        .iter()
        .map(|&s| (s, Arc::clone(&datasets[&s])))
        .collect();
    let model_cfg = cfg.model.clone();
    let base = cfg.train.clone();
    let lambda = cfg.train.lambda;
    let sigmas = sweep.sigmas.clone();
    let noise = sweep.spec.clone();

    let outputs = map_cells(cells, jobs, |(seed, data)| -> std::result::Result<(Vec<RobustnessPoint>, Vec<String>), CellFailure> {
        let fail = |error: String| CellFailure {
            variant: "robustness".into(),
            lambda: Some(lambda),
            seed,
            error,
        };
        let start = Instant::now();
        let (dyn_model, _, dyn_clean) =
            train_dynamic_cell(&model_cfg, &base, &data, lambda, seed, base.ablation)
                .map_err(|e| fail(e.to_string()))?;
        let (static_name, static_plan) = dyn_model
            .static_baselines()
            .pop()
            .expect("both architectures define baselines");
        let (static_model, _, static_clean) =
            train_static_cell(&model_cfg, &base, &data, seed, &static_plan)
                .map_err(|e| fail(e.to_string()))?;
        save_model(&dyn_model, ckpt_dir.join(format!("robust_seed{seed}_dynamic.ckpt")))
            .map_err(|e| fail(e.to_string()))?;
        save_model(&static_model, ckpt_dir.join(format!("robust_seed{seed}_{static_name}.ckpt")))
            .map_err(|e| fail(e.to_string()))?;

        let dyn_acc0 = dyn_clean.accuracy.expect("classification was enforced");
        let static_acc0 = static_clean.accuracy.expect("classification was enforced");
        let mut points = Vec::with_capacity(sigmas.len());
        for (i, &sigma) in sigmas.iter().enumerate() {
            let spec = NoiseSpec { sigma, ..noise.clone() };
            // One corruption per (seed, sigma), shared by both models:
            // the comparison stays paired.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(1_000 + i as u64);
            let noisy = inject_noise(&data.1, &spec, &mut rng).map_err(|e| fail(e.to_string()))?;
            let dyn_report = evaluate(&dyn_model, &noisy, InferencePolicy::Hard, base.task_loss)
                .map_err(|e| fail(e.to_string()))?;
            let static_report =
                evaluate_forced(&static_model, &noisy, &static_plan, base.task_loss)
                    .map_err(|e| fail(e.to_string()))?;
            let dyn_acc = dyn_report.accuracy.expect("classification was enforced");
            let static_acc = static_report.accuracy.expect("classification was enforced");
            points.push(RobustnessPoint {
                sigma,
                seed,
                dyn_accuracy: dyn_acc,
                static_accuracy: static_acc,
                dyn_drop: dyn_acc0 - dyn_acc,
                static_drop: static_acc0 - static_acc,
            });
        }
        let events = vec![ndjson_line(&CellEvent {
            event: "cell",
            variant: "robustness",
            lambda: Some(lambda),
            seed,
            status: "ok",
            wall_time_s: start.elapsed().as_secs_f64(),
            error: None,
        })];
        Ok((points, events))
    });

    let mut points = Vec::new();
    let mut failures = Vec::new();
    for out in outputs {
        match out {
            Ok((p, ev)) => {
                points.extend(p);
                events.extend(ev);
            }
            Err(f) => {
                events.push(ndjson_line(&CellEvent {
                    event: "cell",
                    variant: &f.variant,
                    lambda: f.lambda,
                    seed: f.seed,
                    status: "failed",
                    wall_time_s: 0.0,
                    error: Some(&f.error),
                }));
                failures.push(f);
            }
        }
    }

    let mut csv = String::from("sigma,seed,dyn_accuracy,static_accuracy,dyn_drop,static_drop\n");
    for p in &points {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            p.sigma, p.seed, p.dyn_accuracy, p.static_accuracy, p.dyn_drop, p.static_drop
        ));
    }
    fs::write(cfg.output_dir.join("robustness.csv"), csv)?;
    fs::write(
        cfg.output_dir.join("robustness.json"),
        serde_json::to_string_pretty(&points)?,
    )?;
    let mut log = events.join("\n");
    log.push('\n');
    fs::write(cfg.output_dir.join("log.ndjson"), log)?;
    Ok(RobustnessOutcome { points, failures })
}

// ---------------------------------------------------------------------------
// Ablation
// ---------------------------------------------------------------------------

/// Training-strategy comparison at the config's λ: the three gate-training
/// variants plus the always-everything static baseline, per seed. Rows
/// carry degenerate-gate flags; nothing is asserted about which wins.
pub fn run_ablation(cfg: &ExperimentConfig, jobs: usize) -> Result<AblationOutcome> {
    cfg.validate()?;
    let ckpt_dir = cfg.output_dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir)?;
    let mut events = Vec::new();
    let datasets = prepare_datasets(cfg, &mut events)?;

    let variants: [(&'static str, Option<Ablation>); 4] = [
        ("full", Some(Ablation::Full)),
        ("one_stage", Some(Ablation::OneStage)),
        ("frozen_backbone", Some(Ablation::FrozenBackbone)),
        (reference_variant(&cfg.model), None),
    ];
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for &(name, ablation) in &variants {
            cells.push((seed, name, ablation, Arc::clone(&datasets[&seed])));
        }
    }

    let model_cfg = cfg.model.clone();
    let base = cfg.train.clone();
    let lambda = cfg.train.lambda;
    let labels = Model::build(&model_cfg)?.branch_labels();
    let outputs = map_cells(cells, jobs, |(seed, name, ablation, data)| -> std::result::Result<CellOutput, CellFailure> {
        let fail = |error: String| CellFailure {
            variant: name.into(),
            lambda: Some(lambda),
            seed,
            error,
        };
        let start = Instant::now();
        let (model, log, report) = match ablation {
            Some(ab) => train_dynamic_cell(&model_cfg, &base, &data, lambda, seed, ab)
                .map_err(|e| fail(e.to_string()))?,
            None => {
                let plan = Model::build(&model_cfg)
                    .map(|m| m.static_baselines().pop().expect("baselines exist").1)
                    .map_err(|e| fail(e.to_string()))?;
                train_static_cell(&model_cfg, &base, &data, seed, &plan)
                    .map_err(|e| fail(e.to_string()))?
            }
        };
        save_model(&model, ckpt_dir.join(format!("ablate_seed{seed}_{name}.ckpt")))
            .map_err(|e| fail(e.to_string()))?;
        let wall = start.elapsed().as_secs_f64();
        let mut cell_events = epoch_events(name, lambda, seed, &log);
        cell_events.push(ndjson_line(&CellEvent {
            event: "cell",
            variant: name,
            lambda: Some(lambda),
            seed,
            status: "ok",
            wall_time_s: wall,
            error: None,
        }));
        let record = MetricsRecord::from_eval(name, lambda, seed, &report, None, wall, &labels);
        Ok(CellOutput { records: vec![record], events: cell_events })
    });

    let mut records = Vec::new();
    let mut failures = Vec::new();
    for out in outputs {
        match out {
            Ok(cell) => {
                records.extend(cell.records);
                events.extend(cell.events);
            }
            Err(f) => {
                events.push(ndjson_line(&CellEvent {
                    event: "cell",
                    variant: &f.variant,
                    lambda: f.lambda,
                    seed: f.seed,
                    status: "failed",
                    wall_time_s: 0.0,
                    error: Some(&f.error),
                }));
                failures.push(f);
            }
        }
    }
    fill_reductions(&mut records, reference_variant(&cfg.model));
    write_outputs(&cfg.output_dir, "ablation", &records, &events)?;
    Ok(AblationOutcome { records, failures })
}

// ---------------------------------------------------------------------------
// Inspection
// ---------------------------------------------------------------------------

/// One test sample's routing decision, with its difficulty label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectRow {
    pub index: usize,
    pub difficulty: String,
    pub selected: Vec<usize>,
    /// Human-readable decision, slot labels joined with `+`.
    pub decision: String,
    /// Whether this is the all-cheapest decision vector.
    pub cheapest: bool,
}

/// Per-sample decisions plus the difficulty × decision cross-tab.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectOutput {
    pub rows: Vec<InspectRow>,
    pub crosstab: BTreeMap<String, BTreeMap<String, u64>>,
}

/// Run the deployed gate over a dataset and tabulate which difficulty
/// class lands on which decision.
pub fn inspect_decisions(model: &Model, set: &Dataset) -> Result<InspectOutput> {
    let idx: Vec<usize> = (0..set.len()).collect();
    let inputs = model.inputs_from(set, &idx)?;
    let res = model.forward_inference(&inputs, InferencePolicy::Hard)?;
    let labels = model.branch_labels();
    let cheapest = model.cheapest_decision();
    let mut rows = Vec::with_capacity(set.len());
    let mut crosstab: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    for (i, d) in res.decisions.iter().enumerate() {
        let difficulty = match set.samples[i].difficulty {
            Difficulty::Easy => "easy".to_string(),
            Difficulty::Hard => "hard".to_string(),
        };
        let decision = d
            .selected
            .iter()
            .enumerate()
            .map(|(slot, &sel)| labels[slot][sel].clone())
            .collect::<Vec<_>>()
            .join("+");
        *crosstab.entry(difficulty.clone()).or_default().entry(decision.clone()).or_default() +=
            1;
        rows.push(InspectRow {
            index: i,
            difficulty,
            selected: d.selected.clone(),
            decision,
            cheapest: d.selected == cheapest,
        });
    }
    Ok(InspectOutput { rows, crosstab })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TaskKind;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            schema: SCHEMA_VERSION,
            model: ModelConfig::ModalityMoe(
                crate::moe::MoeConfig::two_expert(vec![6, 6], 2).unwrap(),
            ),
            data: SyntheticSpec {
                dims: vec![6, 6],
                n_train: 96,
                n_test: 48,
                p_hard: 0.25,
                task: TaskKind::BinaryClass,
                signal_scale: 3.0,
                noise_scale: 1.0,
                seed: 0,
            },
            train: TrainConfig {
                stage1_epochs: 1,
                stage2_epochs: 1,
                batch_size: 32,
                learning_rate: 1e-2,
                ..TrainConfig::default()
            },
            lambda_values: vec![0.01],
            noise_sweep: Some(NoiseSweep {
                sigmas: vec![0.0, 2.0],
                spec: NoiseSpec::default(),
            }),
            seeds: vec![0],
            output_dir: dir.to_path_buf(),
        }
    }

    #[test]
    fn config_validation_rejects_structural_mistakes() {
        let dir = tempfile::tempdir().unwrap();
        let good = tiny_config(dir.path());
        assert!(good.validate().is_ok());

        let mut bad = good.clone();
        bad.schema = 2;
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.lambda_values.clear();
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.seeds.clear();
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.lambda_values = vec![-0.1];
        assert!(bad.validate().is_err());

        let mut bad = good.clone();
        bad.data.dims = vec![6, 7];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_json_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let text = cfg.to_json().unwrap();
        assert!(text.contains("\"schema\": 1"));
        let back = ExperimentConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn inspection_covers_every_sample_once() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let (_, test_set) = generate(&cfg.data).unwrap();
        let mut model = Model::build(&cfg.model).unwrap();
        model.init(0);
        let out = inspect_decisions(&model, &test_set).unwrap();
        assert_eq!(out.rows.len(), test_set.len());
        let total: u64 = out.crosstab.values().flat_map(|m| m.values()).sum();
        assert_eq!(total as usize, test_set.len());
    }
}

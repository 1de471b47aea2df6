//! `dynfuse` — experiment runner for dynamic multimodal fusion models.
//!
//! Subcommands mirror the experiment protocols: `generate` synthetic
//! datasets, `train` one model, `evaluate` a checkpoint, run a λ `sweep`,
//! a `robustness` curve, or a training-strategy `ablate`, and `inspect`
//! per-sample routing decisions. Exit codes: 0 success, 1 usage error,
//! 2 run failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};

use dynfuse::checkpoint::{load_model, save_model};
use dynfuse::data::{generate, load_dataset, save_dataset, Dataset, SyntheticSpec, TaskKind};
use dynfuse::harness::{
    inspect_decisions, run_ablation, run_lambda_sweep, run_robustness, ExperimentConfig,
};
use dynfuse::metrics::{records_to_csv, MetricsRecord};
use dynfuse::model::Model;
use dynfuse::moe::InferencePolicy;
use dynfuse::trainer::{evaluate, train, TaskLoss, TrainConfig};
use dynfuse::{Error, Result};

#[derive(Parser)]
#[command(
    name = "dynfuse",
    version,
    about = "Train and measure dynamic multimodal fusion models on synthetic data"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset; writes <out> (train split) and a
    /// sibling `_test` file.
    Generate {
        /// Experiment config or bare dataset spec (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override the dataset seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output path for the train split, e.g. `d.dmmd`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one dynamic model from an experiment config and report its
    /// test metrics.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the run seed (data, init, and training).
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint path (default: `<output_dir>/model.ckpt`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Evaluate a checkpoint on a dataset under hard routing.
    Evaluate {
        /// Model checkpoint (`.ckpt`).
        ckpt: PathBuf,
        /// Dataset file (`.dmmd`).
        data: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// λ sweep with paired static baselines; writes metrics.csv/.json.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Restrict the run to one seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Parallel cells (0 = auto, 1 = sequential).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Noise-robustness curve: dynamic model vs static baseline.
    Robustness {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Training-strategy ablation (full / one_stage / frozen_backbone).
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
    /// Print per-sample gate decisions with difficulty labels.
    Inspect {
        ckpt: PathBuf,
        data: PathBuf,
        #[arg(long, value_enum, default_value_t)]
        format: Format,
    },
}

fn main() -> ExitCode {
    match Cli::try_parse() {
        Ok(cli) => match run(cli.cmd) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::from(2)
            }
        },
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            ExitCode::from(code)
        }
    }
}

/// `generate` accepts either a full experiment config or a bare dataset
/// spec; anything else is reported against the stricter schema.
fn load_data_spec(path: &Path) -> Result<SyntheticSpec> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(cfg) = ExperimentConfig::from_json(&text) {
        return Ok(cfg.data);
    }
    let spec: SyntheticSpec = serde_json::from_str(&text)?;
    spec.validate()?;
    Ok(spec)
}

fn test_split_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("data");
    let ext = out.extension().and_then(|s| s.to_str()).unwrap_or("dmmd");
    out.with_file_name(format!("{stem}_test.{ext}"))
}

/// The deployment loss implied by a dataset's labels and a model's head.
fn infer_loss(model: &Model, set: &Dataset) -> Result<TaskLoss> {
    match (set.spec.task, model.classes()) {
        (TaskKind::BinaryClass, 2) => Ok(TaskLoss::CrossEntropy),
        (TaskKind::BinaryClass, 1) => Ok(TaskLoss::BinaryCrossEntropy),
        (TaskKind::Multiclass(k), head) if head == k => Ok(TaskLoss::CrossEntropy),
        (TaskKind::Regression, 1) => Ok(TaskLoss::Mae),
        (task, head) => Err(Error::Config(format!(
            "checkpoint head width {head} does not fit dataset task {task:?}"
        ))),
    }
}

fn print_records(records: &[MetricsRecord], format: Format) -> Result<()> {
    match format {
        Format::Json => println!("{}", serde_json::to_string_pretty(records)?),
        Format::Csv => print!("{}", records_to_csv(records)?),
    }
    Ok(())
}

fn apply_overrides(
    cfg: &mut ExperimentConfig,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<()> {
    if let Some(s) = seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()
}

fn report_failures(failures: &[dynfuse::harness::CellFailure]) {
    for f in failures {
        eprintln!(
            "cell failed: variant={} seed={}{}: {}",
            f.variant,
            f.seed,
            f.lambda.map(|l| format!(" lambda={l}")).unwrap_or_default(),
            f.error
        );
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Generate { config, seed, out } => {
            let mut spec = load_data_spec(&config)?;
            if let Some(s) = seed {
                spec.seed = s;
            }
            let (train_set, test_set) = generate(&spec)?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            let test_path = test_split_path(&out);
            save_dataset(&train_set, &out)?;
            save_dataset(&test_set, &test_path)?;
            println!(
                "{}",
                serde_json::json!({
                    "train": out,
                    "test": test_path,
                    "n_train": train_set.len(),
                    "n_test": test_set.len(),
                    "seed": spec.seed,
                })
            );
            Ok(())
        }
        Cmd::Train { config, seed, out, format } => {
            let mut cfg = ExperimentConfig::from_json_file(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.data.seed = s;
            }
            cfg.validate()?;
            let run_seed = cfg.train.seed;
            let data_spec = SyntheticSpec { seed: run_seed, ..cfg.data.clone() };
            let (train_set, test_set) = generate(&data_spec)?;
            let mut model = Model::build(&cfg.model)?;
            model.init(run_seed);
            let train_cfg = TrainConfig { seed: run_seed, ..cfg.train.clone() };
            train(&mut model, &train_set, &train_cfg)?;
            let report =
                evaluate(&model, &test_set, InferencePolicy::Hard, train_cfg.task_loss)?;
            let ckpt = out.unwrap_or_else(|| cfg.output_dir.join("model.ckpt"));
            if let Some(dir) = ckpt.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            save_model(&model, &ckpt)?;
            let record = MetricsRecord::from_eval(
                "dynamic",
                train_cfg.lambda,
                run_seed,
                &report,
                None,
                0.0,
                &model.branch_labels(),
            );
            eprintln!("checkpoint written to {}", ckpt.display());
            print_records(&[record], format)
        }
        Cmd::Evaluate { ckpt, data, format } => {
            let model = load_model(&ckpt)?;
            let set = load_dataset(&data)?;
            let loss = infer_loss(&model, &set)?;
            let report = evaluate(&model, &set, InferencePolicy::Hard, loss)?;
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&report)?),
                Format::Csv => {
                    let record = MetricsRecord::from_eval(
                        "evaluate",
                        0.0,
                        set.spec.seed,
                        &report,
                        None,
                        0.0,
                        &model.branch_labels(),
                    );
                    print!("{}", records_to_csv(&[record])?);
                }
            }
            Ok(())
        }
        Cmd::Sweep { config, seed, out, jobs, format } => {
            let mut cfg = ExperimentConfig::from_json_file(&config)?;
            apply_overrides(&mut cfg, seed, out)?;
            let outcome = run_lambda_sweep(&cfg, jobs)?;
            report_failures(&outcome.failures);
            print_records(&outcome.records, format)?;
            eprintln!(
                "sweep finished: {} records, {} failures, outputs in {}",
                outcome.records.len(),
                outcome.failures.len(),
                cfg.output_dir.display()
            );
            Ok(())
        }
        Cmd::Robustness { config, seed, out, jobs, format } => {
            let mut cfg = ExperimentConfig::from_json_file(&config)?;
            apply_overrides(&mut cfg, seed, out)?;
            let outcome = run_robustness(&cfg, jobs)?;
            report_failures(&outcome.failures);
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&outcome.points)?),
                Format::Csv => {
                    println!("sigma,seed,dyn_accuracy,static_accuracy,dyn_drop,static_drop");
                    for p in &outcome.points {
                        println!(
                            "{},{},{},{},{},{}",
                            p.sigma,
                            p.seed,
                            p.dyn_accuracy,
                            p.static_accuracy,
                            p.dyn_drop,
                            p.static_drop
                        );
                    }
                }
            }
            Ok(())
        }
        Cmd::Ablate { config, seed, out, jobs, format } => {
            let mut cfg = ExperimentConfig::from_json_file(&config)?;
            apply_overrides(&mut cfg, seed, out)?;
            let outcome = run_ablation(&cfg, jobs)?;
            report_failures(&outcome.failures);
            print_records(&outcome.records, format)?;
            Ok(())
        }
        Cmd::Inspect { ckpt, data, format } => {
            let model = load_model(&ckpt)?;
            let set = load_dataset(&data)?;
            let out = inspect_decisions(&model, &set)?;
            match format {
                Format::Json => println!("{}", serde_json::to_string_pretty(&out)?),
                Format::Csv => {
                    println!("index,difficulty,decision,cheapest");
                    for row in &out.rows {
                        println!(
                            "{},{},{},{}",
                            row.index, row.difficulty, row.decision, row.cheapest
                        );
                    }
                    eprintln!("crosstab (difficulty -> decision -> count):");
                    for (difficulty, row) in &out.crosstab {
                        for (decision, count) in row {
                            eprintln!("  {difficulty} -> {decision}: {count}");
                        }
                    }
                }
            }
            Ok(())
        }
    }
}

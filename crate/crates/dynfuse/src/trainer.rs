//! Two-stage training, optimizers, task losses, and evaluation.
//!
//! Stage I brings every branch up to strength without the gate: the
//! branch-routed model trains all experts jointly on summed per-expert
//! losses, the cell-routed model executes one uniformly random decision
//! vector per batch. Stage II optimizes the full objective — task loss
//! plus the λ-weighted resource term — through the gate's relaxation
//! (straight-through by default, annealed soft as the alternative).
//!
//! Stage boundaries are guarded by parameter digests: the gate must be
//! bit-identical before and after stage I, and a frozen backbone must be
//! bit-identical across stage II. Non-finite gradients abort training with
//! the offending parameter's name; nothing is ever clamped silently.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{total_loss, CostNormalization, ResourceLossConfig};
use crate::data::{Dataset, Difficulty, TaskKind};
use crate::error::{Error, Result};
use crate::gating::{AnnealSchedule, GateDecision, GateMode};
use crate::model::Model;
use crate::moe::InferencePolicy;
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{argmax, Tape, Value};

/// A gate slot counts as collapsed when its selection entropy over the
/// evaluation set falls below this many nats.
pub const DEGENERATE_ENTROPY_NATS: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum,
    AdaptiveMoments,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLoss {
    CrossEntropy,
    BinaryCrossEntropy,
    Mse,
    Mae,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateTraining {
    /// Hard decisions forward, soft gradients backward; τ fixed at 1.
    StraightThrough,
    /// Soft mixing with the temperature annealed across stage II.
    AnnealedSoft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Both stages, everything trainable in stage II.
    Full,
    /// Skip stage I entirely.
    OneStage,
    /// Stage II updates only the gate.
    FrozenBackbone,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub optimizer: OptimizerKind,
    pub lambda: f64,
    pub normalization: CostNormalization,
    pub gate_training: GateTraining,
    /// Temperature endpoints for `annealed_soft`; the decay is stretched
    /// across stage II, so `total_epochs` here does not limit training.
    pub anneal: AnnealSchedule,
    pub task_loss: TaskLoss,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1_epochs: 6,
            stage2_epochs: 12,
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            momentum: 0.9,
            optimizer: OptimizerKind::AdaptiveMoments,
            lambda: 0.0,
            normalization: CostNormalization::CheapestExpert,
            gate_training: GateTraining::StraightThrough,
            anneal: AnnealSchedule::default(),
            task_loss: TaskLoss::CrossEntropy,
            ablation: Ablation::Full,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Stage-I length after the ablation is applied.
    pub fn stage1_epochs_effective(&self) -> usize {
        match self.ablation {
            Ablation::OneStage => 0,
            _ => self.stage1_epochs,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage2_epochs == 0 {
            return Err(Error::Config("stage 2 needs at least one epoch".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be non-negative and finite, got {}",
                self.learning_rate
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight decay must be non-negative and finite, got {}",
                self.weight_decay
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::Config(format!(
                "lambda must be non-negative and finite, got {}",
                self.lambda
            )));
        }
        for (what, tau) in [("tau0", self.anneal.tau0), ("tau_final", self.anneal.tau_final)] {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::Config(format!("anneal {what} must be positive, got {tau}")));
            }
        }
        Ok(())
    }
}

/// One uniformly random decision vector — the stage-I plan sampler for
/// cell-routed models.
pub fn uniform_decision(slots: usize, branches: usize, rng: &mut impl Rng) -> Vec<usize> {
    (0..slots).map(|_| rng.gen_range(0..branches)).collect()
}

// ---------------------------------------------------------------------------
// Optimizers
// ---------------------------------------------------------------------------

/// First-order optimizer over a parameter store. Both kinds keep their state
/// indexed by parameter id, so freezing a subset costs nothing.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    weight_decay: f64,
    momentum: f64,
    beta2: f64,
    eps: f64,
    step_count: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(
        kind: OptimizerKind,
        lr: f64,
        weight_decay: f64,
        momentum: f64,
        store: &ParamStore,
    ) -> Self {
        let sizes: Vec<usize> = (0..store.len()).map(|id| store.tensor(id).numel()).collect();
        Optimizer {
            kind,
            lr,
            weight_decay,
            momentum,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn from_config(cfg: &TrainConfig, store: &ParamStore) -> Self {
        Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.weight_decay, cfg.momentum, store)
    }

    /// Apply one update to the given parameters from their accumulated
    /// gradients. A missing gradient counts as zero; a non-finite one
    /// aborts, naming the parameter.
    pub fn step(&mut self, store: &mut ParamStore, params: &[ParamId]) -> Result<()> {
        self.step_count += 1;
        for &id in params {
            if let Some(g) = store.tensor(id).grad.as_ref() {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NanGradient { param: store.name(id).to_string() });
                }
            }
            let grad = match store.tensor(id).grad.as_ref() {
                Some(g) => g.clone(),
                None => vec![0.0; store.tensor(id).numel()],
            };
            let t = self.step_count;
            let (lr, wd, m) = (self.lr, self.weight_decay, self.momentum);
            match self.kind {
                OptimizerKind::SgdMomentum => {
                    let v = &mut self.first[id];
                    let p = &mut store.tensor_mut(id).data;
                    for i in 0..p.len() {
                        v[i] = m * v[i] + grad[i];
                        p[i] -= lr * (v[i] + wd * p[i]);
                    }
                }
                OptimizerKind::AdaptiveMoments => {
                    let bc1 = 1.0 - m.powi(t as i32);
                    let bc2 = 1.0 - self.beta2.powi(t as i32);
                    for i in 0..grad.len() {
                        let m1 = &mut self.first[id][i];
                        let m2 = &mut self.second[id][i];
                        *m1 = m * *m1 + (1.0 - m) * grad[i];
                        *m2 = self.beta2 * *m2 + (1.0 - self.beta2) * grad[i] * grad[i];
                        let mhat = *m1 / bc1;
                        let vhat = *m2 / bc2;
                        let p = &mut store.tensor_mut(id).data[i];
                        *p -= lr * (mhat / (vhat.sqrt() + self.eps) + wd * *p);
                    }
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Task losses
// ---------------------------------------------------------------------------

enum BatchTargets {
    Classes(Vec<usize>),
    Values(Vec<f64>),
}

fn batch_targets(set: &Dataset, idx: &[usize], loss: TaskLoss) -> Result<BatchTargets> {
    match loss {
        TaskLoss::CrossEntropy => Ok(BatchTargets::Classes(set.class_rows(idx)?)),
        TaskLoss::BinaryCrossEntropy => Ok(BatchTargets::Values(
            set.class_rows(idx)?.iter().map(|&c| c as f64).collect(),
        )),
        TaskLoss::Mse | TaskLoss::Mae => idx
            .iter()
            .map(|&i| {
                set.samples[i].label.value().ok_or(Error::Config(
                    "regression loss on a classification dataset".into(),
                ))
            })
            .collect::<Result<Vec<f64>>>()
            .map(BatchTargets::Values),
    }
}

fn apply_loss(tape: &mut Tape, output: Value, loss: TaskLoss, targets: &BatchTargets) -> Result<Value> {
    match (loss, targets) {
        (TaskLoss::CrossEntropy, BatchTargets::Classes(t)) => tape.cross_entropy(output, t),
        (TaskLoss::BinaryCrossEntropy, BatchTargets::Values(t)) => {
            tape.binary_cross_entropy(output, t)
        }
        (TaskLoss::Mse, BatchTargets::Values(t)) => tape.mse_loss(output, t),
        (TaskLoss::Mae, BatchTargets::Values(t)) => tape.mae_loss(output, t),
        _ => Err(Error::Config("task loss does not match the assembled targets".into())),
    }
}

/// Reject combinations of loss, label kind, and head width that cannot
/// work together, before any compute is spent.
pub fn check_compatible(model: &Model, task: TaskKind, loss: TaskLoss) -> Result<()> {
    let head = model.classes();
    let ok = match (loss, task) {
        (TaskLoss::CrossEntropy, TaskKind::BinaryClass) => head == 2,
        (TaskLoss::CrossEntropy, TaskKind::Multiclass(k)) => head == k,
        (TaskLoss::BinaryCrossEntropy, TaskKind::BinaryClass) => head == 1,
        (TaskLoss::Mse | TaskLoss::Mae, TaskKind::Regression) => head == 1,
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "task loss {loss:?} incompatible with label kind {task:?} and head width {head}"
        )))
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1 = branch pretraining, 2 = joint fine-tuning, 0 = forced-plan
    /// training of a static baseline.
    pub stage: u8,
    pub epoch: usize,
    pub task_loss: f64,
    pub resource_loss: f64,
    /// Gate temperature; absent in stages that run no gate.
    pub tau: Option<f64>,
    /// Per-slot, per-branch selection frequencies over the epoch's
    /// training decisions; empty in stages that run no gate.
    pub selection_ratio: Vec<Vec<f64>>,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn epoch_order(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Temperature for a stage-II epoch: fixed at 1 for straight-through
/// training, otherwise the configured endpoints stretched geometrically
/// across the stage.
fn stage2_tau(cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    match cfg.gate_training {
        GateTraining::StraightThrough => Ok(1.0),
        GateTraining::AnnealedSoft => {
            let span = cfg.stage2_epochs - 1;
            let sched = AnnealSchedule {
                tau0: cfg.anneal.tau0,
                tau_final: cfg.anneal.tau_final,
                total_epochs: span,
            };
            sched.tau(epoch.min(span))
        }
    }
}

fn apply_grads(model: &mut Model, tape: &Tape, opt: &mut Optimizer, trainable: &[ParamId]) -> Result<()> {
    let store = model.store_mut();
    store.zero_grads();
    tape.accumulate_param_grads(store.tensors_mut());
    opt.step(store, trainable)
}

/// Two-stage training of a routed model, in place. Returns the epoch log.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    check_compatible(model, data.spec.task, cfg.task_loss)?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let cost_digest = model.cost_table().digest();
    let gate_ids = model.gate_param_ids();
    let backbone_ids = model.backbone_param_ids();
    let all_ids = model.all_param_ids();
    let mut opt = Optimizer::from_config(cfg, model.store());
    let mut rng_shuffle = stream(cfg.seed, 1);
    let mut rng_gate = stream(cfg.seed, 2);
    let mut rng_plan = stream(cfg.seed, 3);
    let mut log = Vec::new();

    // Stage I: every branch learns; the gate must not move.
    let gate_before = model.store().digest(&gate_ids);
    for epoch in 0..cfg.stage1_epochs_effective() {
        let order = epoch_order(data.len(), &mut rng_shuffle);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs = model.inputs_from(data, chunk)?;
            let targets = batch_targets(data, chunk, cfg.task_loss)?;
            let (mut tape, loss) = match &*model {
                Model::Moe(m) => {
                    // Joint pretraining: the same batch loss, summed over
                    // every expert, so all branches get equal update counts.
                    let (mut tape, outs) = m.forward_all_experts(&inputs)?;
                    let mut total: Option<Value> = None;
                    for &out in &outs {
                        let l = apply_loss(&mut tape, out, cfg.task_loss, &targets)?;
                        total = Some(match total {
                            Some(t) => tape.add(t, l)?,
                            None => l,
                        });
                    }
                    (tape, total.expect("at least one expert"))
                }
                Model::Fusion(_) => {
                    let plan =
                        uniform_decision(model.slots(), model.branches(), &mut rng_plan);
                    let fwd = model.forward_plan(&inputs, &plan)?;
                    let mut tape = fwd.tape;
                    let loss = apply_loss(&mut tape, fwd.output, cfg.task_loss, &targets)?;
                    (tape, loss)
                }
            };
            loss_sum += tape.data(loss)[0];
            batches += 1;
            tape.backward(loss)?;
            apply_grads(model, &tape, &mut opt, &backbone_ids)?;
        }
        log.push(EpochLog {
            stage: 1,
            epoch,
            task_loss: loss_sum / batches as f64,
            resource_loss: 0.0,
            tau: None,
            selection_ratio: Vec::new(),
        });
    }
    assert_eq!(
        model.store().digest(&gate_ids),
        gate_before,
        "branch pretraining must leave the gate untouched"
    );

    // Stage II: joint optimization of task + resource through the gate.
    let backbone_before = model.store().digest(&backbone_ids);
    let trainable: &[ParamId] = match cfg.ablation {
        Ablation::FrozenBackbone => &gate_ids,
        _ => &all_ids,
    };
    let mode = match cfg.gate_training {
        GateTraining::StraightThrough => GateMode::HardStraightThrough,
        GateTraining::AnnealedSoft => GateMode::Soft,
    };
    let res_cfg = ResourceLossConfig { lambda: cfg.lambda, normalization: cfg.normalization };
    for epoch in 0..cfg.stage2_epochs {
        let tau = stage2_tau(cfg, epoch)?;
        let order = epoch_order(data.len(), &mut rng_shuffle);
        let (mut task_sum, mut res_sum, mut batches) = (0.0, 0.0, 0usize);
        let mut counts = vec![vec![0u64; model.branches()]; model.slots()];
        let mut seen = 0u64;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs = model.inputs_from(data, chunk)?;
            let targets = batch_targets(data, chunk, cfg.task_loss)?;
            let mut fwd = model.forward_train(&inputs, mode, tau, &mut rng_gate)?;
            let task = apply_loss(&mut fwd.tape, fwd.output, cfg.task_loss, &targets)?;
            let resource = model.resource_term(&mut fwd.tape, &fwd.decisions, &res_cfg)?;
            let total = total_loss(&mut fwd.tape, task, resource)?;
            task_sum += fwd.tape.data(task)[0];
            res_sum += fwd.tape.data(resource)[0];
            batches += 1;
            for d in &fwd.decisions {
                for (slot, &sel) in d.selected.iter().enumerate() {
                    counts[slot][sel] += 1;
                }
                seen += 1;
            }
            fwd.tape.backward(total)?;
            apply_grads(model, &fwd.tape, &mut opt, trainable)?;
        }
        log.push(EpochLog {
            stage: 2,
            epoch,
            task_loss: task_sum / batches as f64,
            resource_loss: res_sum / batches as f64,
            tau: Some(tau),
            selection_ratio: counts
                .iter()
                .map(|c| c.iter().map(|&x| x as f64 / seen as f64).collect())
                .collect(),
        });
    }
    if cfg.ablation == Ablation::FrozenBackbone {
        assert_eq!(
            model.store().digest(&backbone_ids),
            backbone_before,
            "frozen-backbone training must leave non-gate parameters untouched"
        );
    }
    assert_eq!(
        model.cost_table().digest(),
        cost_digest,
        "cost tables are constant for the model's lifetime"
    );
    Ok(log)
}

/// Train a model under one fixed decision vector for the full epoch budget
/// (stage I + stage II lengths): the paired static baselines. The gate
/// never runs.
pub fn train_forced(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    plan: &[usize],
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    check_compatible(model, data.spec.task, cfg.task_loss)?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let backbone_ids = model.backbone_param_ids();
    let mut opt = Optimizer::from_config(cfg, model.store());
    let mut rng_shuffle = stream(cfg.seed, 1);
    let mut log = Vec::new();
    let epochs = cfg.stage1_epochs_effective() + cfg.stage2_epochs;
    for epoch in 0..epochs {
        let order = epoch_order(data.len(), &mut rng_shuffle);
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let inputs = model.inputs_from(data, chunk)?;
            let targets = batch_targets(data, chunk, cfg.task_loss)?;
            let fwd = model.forward_plan(&inputs, plan)?;
            let mut tape = fwd.tape;
            let loss = apply_loss(&mut tape, fwd.output, cfg.task_loss, &targets)?;
            loss_sum += tape.data(loss)[0];
            batches += 1;
            tape.backward(loss)?;
            apply_grads(model, &tape, &mut opt, &backbone_ids)?;
        }
        log.push(EpochLog {
            stage: 0,
            epoch,
            task_loss: loss_sum / batches as f64,
            resource_loss: 0.0,
            tau: None,
            selection_ratio: Vec::new(),
        });
    }
    Ok(log)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Everything `evaluate` measures on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: Option<f64>,
    pub f1_micro: Option<f64>,
    pub f1_macro: Option<f64>,
    pub mae: Option<f64>,
    /// Reported cost: mean per-sample MAdds from the analytic tables.
    pub mean_madds: f64,
    pub total_madds: u64,
    /// Instrumented multiply-accumulate count of the actual execution.
    pub counted_madds: u64,
    /// Per-slot, per-branch selection frequencies (each row sums to 1).
    pub selection_ratio: Vec<Vec<f64>>,
    /// Per-slot selection entropy in nats.
    pub gate_entropy: Vec<f64>,
    /// True when any slot's entropy is below the collapse threshold.
    /// Always false for forced-plan evaluations, which involve no gate.
    pub degenerate_gate: bool,
    /// Fraction of easy samples routed to the all-cheapest decision.
    pub easy_cheap_fraction: Option<f64>,
    /// Fraction of hard samples routed to the all-cheapest decision.
    pub hard_cheap_fraction: Option<f64>,
}

pub fn entropy_nats(p: &[f64]) -> f64 {
    p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum()
}

/// Accuracy, micro-F1, and macro-F1 for single-label classification.
/// Per-class F1 uses the 0-when-undefined convention.
pub fn classification_metrics(preds: &[usize], labels: &[usize], classes: usize) -> (f64, f64, f64) {
    assert_eq!(preds.len(), labels.len());
    let n = preds.len();
    let mut tp = vec![0u64; classes];
    let mut fp = vec![0u64; classes];
    let mut fneg = vec![0u64; classes];
    let mut hits = 0u64;
    for (&p, &y) in preds.iter().zip(labels) {
        if p == y {
            hits += 1;
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fneg[y] += 1;
        }
    }
    let accuracy = hits as f64 / n as f64;
    let (stp, sfp, sfn) = (
        tp.iter().sum::<u64>() as f64,
        fp.iter().sum::<u64>() as f64,
        fneg.iter().sum::<u64>() as f64,
    );
    let micro = if stp == 0.0 { 0.0 } else { 2.0 * stp / (2.0 * stp + sfp + sfn) };
    let macro_f1 = (0..classes)
        .map(|c| {
            let denom = 2.0 * tp[c] as f64 + fp[c] as f64 + fneg[c] as f64;
            if denom == 0.0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom
            }
        })
        .sum::<f64>()
        / classes as f64;
    (accuracy, micro, macro_f1)
}

fn report_from(
    model: &Model,
    set: &Dataset,
    outputs: &[Vec<f64>],
    decisions: &[GateDecision],
    total_cost: u64,
    counted: u64,
    task: TaskLoss,
    gated: bool,
) -> Result<EvalReport> {
    let n = set.len();
    let (mut accuracy, mut f1_micro, mut f1_macro, mut mae) = (None, None, None, None);
    match task {
        TaskLoss::CrossEntropy | TaskLoss::BinaryCrossEntropy => {
            let labels = set.class_labels()?;
            let classes = set.spec.task.classes().unwrap_or(2);
            let preds: Vec<usize> = outputs
                .iter()
                .map(|row| {
                    if task == TaskLoss::BinaryCrossEntropy {
                        (row[0] > 0.0) as usize
                    } else {
                        argmax(row)
                    }
                })
                .collect();
            let (a, mi, ma) = classification_metrics(&preds, &labels, classes);
            accuracy = Some(a);
            f1_micro = Some(mi);
            f1_macro = Some(ma);
        }
        TaskLoss::Mse | TaskLoss::Mae => {
            let targets = set.target_values()?;
            let err = outputs
                .iter()
                .zip(&targets)
                .map(|(row, t)| (row[0] - t).abs())
                .sum::<f64>()
                / n as f64;
            mae = Some(err);
        }
    }

    let mut counts = vec![vec![0u64; model.branches()]; model.slots()];
    for d in decisions {
        for (slot, &sel) in d.selected.iter().enumerate() {
            counts[slot][sel] += 1;
        }
    }
    let selection_ratio: Vec<Vec<f64>> = counts
        .iter()
        .map(|c| c.iter().map(|&x| x as f64 / n as f64).collect())
        .collect();
    let gate_entropy: Vec<f64> = selection_ratio.iter().map(|r| entropy_nats(r)).collect();
    let degenerate_gate =
        gated && gate_entropy.iter().any(|&h| h < DEGENERATE_ENTROPY_NATS);

    let cheapest = model.cheapest_decision();
    let difficulties = set.difficulties();
    let (mut easy, mut easy_cheap, mut hard, mut hard_cheap) = (0u64, 0u64, 0u64, 0u64);
    for (d, &diff) in decisions.iter().zip(&difficulties) {
        let cheap = d.selected == cheapest;
        match diff {
            Difficulty::Easy => {
                easy += 1;
                easy_cheap += cheap as u64;
            }
            Difficulty::Hard => {
                hard += 1;
                hard_cheap += cheap as u64;
            }
        }
    }
    Ok(EvalReport {
        n,
        accuracy,
        f1_micro,
        f1_macro,
        mae,
        mean_madds: total_cost as f64 / n as f64,
        total_madds: total_cost,
        counted_madds: counted,
        selection_ratio,
        gate_entropy,
        degenerate_gate,
        easy_cheap_fraction: (easy > 0).then(|| easy_cheap as f64 / easy as f64),
        hard_cheap_fraction: (hard > 0).then(|| hard_cheap as f64 / hard as f64),
    })
}

/// Evaluate the deployed model on a dataset: noise-free gating, analytic
/// costs cross-checked against the instrumented counter.
pub fn evaluate(
    model: &Model,
    set: &Dataset,
    policy: InferencePolicy,
    task: TaskLoss,
) -> Result<EvalReport> {
    check_compatible(model, set.spec.task, task)?;
    let idx: Vec<usize> = (0..set.len()).collect();
    let inputs = model.inputs_from(set, &idx)?;
    let res = model.forward_inference(&inputs, policy)?;
    report_from(model, set, &res.outputs, &res.decisions, res.cost, res.counted, task, true)
}

/// Evaluate a static execution plan (no gate, none billed).
pub fn evaluate_forced(
    model: &Model,
    set: &Dataset,
    plan: &[usize],
    task: TaskLoss,
) -> Result<EvalReport> {
    check_compatible(model, set.spec.task, task)?;
    let idx: Vec<usize> = (0..set.len()).collect();
    let inputs = model.inputs_from(set, &idx)?;
    let fwd = model.forward_plan(&inputs, plan)?;
    let outputs = fwd.tape.rows(fwd.output)?;
    let counted = fwd.tape.madds();
    report_from(model, set, &outputs, &fwd.decisions, fwd.cost, counted, task, false)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::InitKind;

    fn one_param_store(value: f64) -> (ParamStore, ParamId) {
        let mut store = ParamStore::new();
        let id = store.register("p", vec![1], InitKind::Constant(value));
        store.init(0);
        (store, id)
    }

    #[test]
    fn zero_learning_rate_changes_nothing() {
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::AdaptiveMoments] {
            let (mut store, id) = one_param_store(1.5);
            let mut opt = Optimizer::new(kind, 0.0, 0.1, 0.9, &store);
            store.tensor_mut(id).grad = Some(vec![0.7]);
            opt.step(&mut store, &[id]).unwrap();
            assert_eq!(store.tensor(id).data[0], 1.5);
        }
    }

    #[test]
    fn sgd_single_step_matches_closed_form() {
        // v = 0·0 + 0.5; p = 1 − 0.1·(0.5 + 0·1) = 0.95.
        let (mut store, id) = one_param_store(1.0);
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 0.1, 0.0, 0.0, &store);
        store.tensor_mut(id).grad = Some(vec![0.5]);
        opt.step(&mut store, &[id]).unwrap();
        assert!((store.tensor(id).data[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn both_optimizers_descend_a_quadratic_bowl() {
        // f(p) = p², gradient 2p, from p = 1 with lr 0.1.
        for kind in [OptimizerKind::SgdMomentum, OptimizerKind::AdaptiveMoments] {
            let (mut store, id) = one_param_store(1.0);
            let mut opt = Optimizer::new(kind, 0.1, 0.0, 0.9, &store);
            for _ in 0..200 {
                let p = store.tensor(id).data[0];
                store.tensor_mut(id).grad = Some(vec![2.0 * p]);
                opt.step(&mut store, &[id]).unwrap();
            }
            let p = store.tensor(id).data[0];
            assert!(p.abs() < 1e-3, "{kind:?} ended at {p}");
        }
    }

    #[test]
    fn non_finite_gradients_abort_with_the_parameter_name() {
        let (mut store, id) = one_param_store(1.0);
        let mut opt = Optimizer::new(OptimizerKind::AdaptiveMoments, 0.1, 0.0, 0.9, &store);
        store.tensor_mut(id).grad = Some(vec![f64::NAN]);
        match opt.step(&mut store, &[id]) {
            Err(Error::NanGradient { param }) => assert_eq!(param, "p"),
            other => panic!("want a gradient abort, got {other:?}"),
        }
    }

    #[test]
    fn random_plans_cover_all_paths_uniformly() {
        // 4 slots × 2 branches = 16 paths; χ² over 10_000 draws must sit
        // below the df=15, p=0.01 critical value.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut counts = [0u64; 16];
        for _ in 0..10_000 {
            let plan = uniform_decision(4, 2, &mut rng);
            let path = plan.iter().enumerate().fold(0usize, |acc, (j, &b)| acc | (b << j));
            counts[path] += 1;
        }
        let expected = 10_000.0 / 16.0;
        let chi2: f64 = counts
            .iter()
            .map(|&o| {
                let d = o as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 30.578, "chi-square {chi2}");
    }

    #[test]
    fn classification_metrics_match_hand_cases() {
        // Perfect predictor.
        let labels = vec![0, 1, 0, 1];
        let (acc, micro, macro_f1) = classification_metrics(&labels, &labels, 2);
        assert_eq!((acc, micro, macro_f1), (1.0, 1.0, 1.0));

        // Constant predictor on a balanced set: accuracy 0.5, class-0 F1
        // 2/3, class-1 F1 0 → macro 1/3.
        let preds = vec![0, 0, 0, 0];
        let (acc, micro, macro_f1) = classification_metrics(&preds, &labels, 2);
        assert!((acc - 0.5).abs() < 1e-12);
        assert!((micro - 0.5).abs() < 1e-12);
        assert!((macro_f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn entropy_is_zero_for_point_mass_and_ln2_for_fair_coin() {
        assert_eq!(entropy_nats(&[1.0, 0.0]), 0.0);
        assert!((entropy_nats(&[0.5, 0.5]) - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn invalid_train_configs_are_rejected() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { stage2_epochs: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { learning_rate: -1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { momentum: 1.0, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { lambda: f64::NAN, ..ok.clone() }.validate().is_err());
        let bad_anneal = AnnealSchedule { tau0: 0.0, tau_final: 1e-4, total_epochs: 10 };
        assert!(TrainConfig { anneal: bad_anneal, ..ok }.validate().is_err());
    }

    #[test]
    fn one_stage_ablation_zeroes_stage_one() {
        let cfg = TrainConfig { ablation: Ablation::OneStage, ..TrainConfig::default() };
        assert_eq!(cfg.stage1_epochs_effective(), 0);
        let cfg = TrainConfig { ablation: Ablation::Full, ..TrainConfig::default() };
        assert_eq!(cfg.stage1_epochs_effective(), cfg.stage1_epochs);
    }
}

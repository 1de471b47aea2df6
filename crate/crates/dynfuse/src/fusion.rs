//! Cell-level dynamic model: two static feature-extraction chains joined by
//! fusion cells whose operation is chosen per sample by one global gate.
//!
//! The first block of each chain always runs — their concatenated outputs
//! feed the gate, which emits all cell decisions at once. From there the
//! fused stream threads through the remaining modality-1 blocks while the
//! modality-2 stream is advanced only as far as some selected non-identity
//! operation still consumes it; the dead suffix of that chain is skipped
//! and not billed. Samples whose decision vectors agree are executed
//! together as one sub-batch, and rows are scattered back into batch order
//! before the head.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostTable;
use crate::error::{Error, Result};
use crate::forward::{InferenceResult, TrainForward};
use crate::gating::{GateDecision, GateMode, GateNetwork};
use crate::nn::{Activation, Mlp, ParamId, ParamStore, SeFusionBlock, WeightedAdd};
use crate::tensor::{Tape, Tensor, Value};

/// The fusion operations a cell may choose from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionOpKind {
    /// Pass the first stream through; the second stream is not consumed.
    Identity,
    /// Elementwise sum of both streams.
    Add,
    /// Learned scalar-weighted sum of both streams.
    WeightedAdd,
    /// Channel-attention fusion: each stream gated by its own bottleneck.
    SeFuse,
}

/// One instantiated operation, with its parameters where it has any.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum FusionOp {
    Identity,
    Add { dim: usize },
    WeightedAdd(WeightedAdd),
    SeFuse(SeFusionBlock),
}

impl FusionOp {
    pub fn kind(&self) -> FusionOpKind {
        match self {
            FusionOp::Identity => FusionOpKind::Identity,
            FusionOp::Add { .. } => FusionOpKind::Add,
            FusionOp::WeightedAdd(_) => FusionOpKind::WeightedAdd,
            FusionOp::SeFuse(_) => FusionOpKind::SeFuse,
        }
    }

    /// Analytic multiply-accumulates per sample.
    pub fn madds(&self) -> u64 {
        match self {
            FusionOp::Identity => 0,
            FusionOp::Add { dim } => *dim as u64,
            FusionOp::WeightedAdd(wa) => wa.madds(),
            FusionOp::SeFuse(se) => se.madds(),
        }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x1: Value,
        x2: Value,
    ) -> Result<Value> {
        match self {
            FusionOp::Identity => Ok(x1),
            FusionOp::Add { .. } => tape.add(x1, x2),
            FusionOp::WeightedAdd(wa) => wa.forward(store, tape, x1, x2),
            FusionOp::SeFuse(se) => se.forward(store, tape, x1, x2),
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match self {
            FusionOp::Identity | FusionOp::Add { .. } => Vec::new(),
            FusionOp::WeightedAdd(wa) => wa.param_ids(),
            FusionOp::SeFuse(se) => se.param_ids(),
        }
    }
}

/// The operation menu of one fusion cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusionCellSpec {
    pub ops: Vec<FusionOp>,
}

impl FusionCellSpec {
    pub fn op_costs(&self) -> Vec<u64> {
        self.ops.iter().map(FusionOp::madds).collect()
    }
}

/// Architecture of a cell-routed two-stream model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Input feature dims of the two streams (exactly two entries).
    pub modality_dims: Vec<usize>,
    pub classes: usize,
    /// Stream width after the first block; all cells fuse at this width.
    pub width: usize,
    /// Number of feature blocks per chain == number of fusion cells.
    pub cells: usize,
    /// Operation menu instantiated in every cell.
    pub ops: Vec<FusionOpKind>,
    /// Bottleneck reduction for `SeFuse` operations.
    pub se_reduction: usize,
    pub gate_hidden: usize,
    pub head_hidden: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            modality_dims: vec![32, 32],
            classes: 2,
            width: 32,
            cells: 4,
            ops: vec![FusionOpKind::Identity, FusionOpKind::SeFuse],
            se_reduction: 4,
            gate_hidden: 16,
            head_hidden: 16,
        }
    }
}

/// What a hard decision vector executes: the chosen op per cell and which
/// second-stream blocks still need to run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecutionPlan {
    pub selected: Vec<usize>,
    /// Execute bit per modality-2 block; index 0 is always true.
    pub run_block_2: Vec<bool>,
}

/// The cell-routed model: two block chains, fusion cells, gate, and head.
#[derive(Debug, Clone)]
pub struct FusionNetwork {
    pub config: FusionConfig,
    pub store: ParamStore,
    pub blocks_1: Vec<Mlp>,
    pub blocks_2: Vec<Mlp>,
    pub cells: Vec<FusionCellSpec>,
    /// Global gate: one slot per cell, fed by both post-block-0 streams.
    pub gate: GateNetwork,
    pub head: Mlp,
    pub costs: CostTable,
}

impl FusionNetwork {
    pub fn new(config: &FusionConfig) -> Result<Self> {
        if config.modality_dims.len() != 2 || config.modality_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "fusion model needs exactly 2 modalities with positive dims, got {:?}",
                config.modality_dims
            )));
        }
        if config.width == 0 || config.cells == 0 {
            return Err(Error::Config("stream width and cell count must be positive".into()));
        }
        if config.ops.len() < 2 {
            return Err(Error::Config(format!(
                "each cell needs at least 2 candidate ops, got {}",
                config.ops.len()
            )));
        }
        if config.classes == 0 {
            return Err(Error::Config(
                "output head needs a positive width (classes, or 1 for regression)".into(),
            ));
        }
        let mut store = ParamStore::new();
        let chain = |store: &mut ParamStore, name: &str, in_dim: usize| -> Result<Vec<Mlp>> {
            (0..config.cells)
                .map(|j| {
                    let dims = if j == 0 { [in_dim, config.width] } else { [config.width, config.width] };
                    Mlp::new(store, &format!("{name}.block{j}"), &dims, Activation::Relu)
                })
                .collect()
        };
        let blocks_1 = chain(&mut store, "m1", config.modality_dims[0])?;
        let blocks_2 = chain(&mut store, "m2", config.modality_dims[1])?;
        let cells = (0..config.cells)
            .map(|j| {
                let ops = config
                    .ops
                    .iter()
                    .enumerate()
                    .map(|(i, kind)| {
                        Ok(match kind {
                            FusionOpKind::Identity => FusionOp::Identity,
                            FusionOpKind::Add => FusionOp::Add { dim: config.width },
                            FusionOpKind::WeightedAdd => FusionOp::WeightedAdd(WeightedAdd::new(
                                &mut store,
                                &format!("cell{j}.op{i}.wadd"),
                                config.width,
                            )),
                            FusionOpKind::SeFuse => FusionOp::SeFuse(SeFusionBlock::new(
                                &mut store,
                                &format!("cell{j}.op{i}.se"),
                                config.width,
                                config.se_reduction,
                            )?),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(FusionCellSpec { ops })
            })
            .collect::<Result<Vec<_>>>()?;
        let gate = GateNetwork::new(
            &mut store,
            "gate",
            2 * config.width,
            config.gate_hidden,
            config.cells,
            config.ops.len(),
        )?;
        let head = Mlp::new(
            &mut store,
            "head",
            &[config.width, config.head_hidden, config.classes],
            Activation::Relu,
        )?;
        let block_costs = vec![
            blocks_1.iter().map(Mlp::madds).collect::<Vec<_>>(),
            blocks_2.iter().map(Mlp::madds).collect::<Vec<_>>(),
        ];
        let op_costs = cells.iter().map(FusionCellSpec::op_costs).collect();
        let costs = CostTable::for_fusion(block_costs, op_costs, gate.madds(), head.madds());
        Ok(FusionNetwork {
            config: config.clone(),
            store,
            blocks_1,
            blocks_2,
            cells,
            gate,
            head,
            costs,
        })
    }

    /// Draw every parameter from the given seed.
    pub fn init(&mut self, seed: u64) {
        self.store.init(seed);
    }

    pub fn cell_count(&self) -> usize {
        self.cells.len()
    }

    pub fn branches(&self) -> usize {
        self.config.ops.len()
    }

    /// Parameters of the blocks, fusion ops, and head.
    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks_1.iter().flat_map(Mlp::param_ids).collect();
        ids.extend(self.blocks_2.iter().flat_map(Mlp::param_ids));
        ids.extend(
            self.cells
                .iter()
                .flat_map(|c| c.ops.iter().flat_map(FusionOp::param_ids)),
        );
        ids.extend(self.head.param_ids());
        ids
    }

    pub fn gate_param_ids(&self) -> Vec<ParamId> {
        self.gate.param_ids()
    }

    /// Turn one hard decision vector into the execution plan it implies.
    pub fn plan_for(&self, selected: &[usize]) -> Result<ExecutionPlan> {
        let f = self.cells.len();
        if selected.len() != f {
            return Err(Error::Dimension {
                what: "decision slots",
                expected: format!("{f}"),
                got: format!("{}", selected.len()),
            });
        }
        for (j, &op) in selected.iter().enumerate() {
            if op >= self.cells[j].ops.len() {
                return Err(Error::Dimension {
                    what: "selected op",
                    expected: format!("< {}", self.cells[j].ops.len()),
                    got: format!("{op} (cell {j})"),
                });
            }
        }
        // The second stream's block j must run iff some cell at or after j
        // consumes that stream; block 0 always runs (it feeds the gate).
        let mut run_block_2 = vec![false; f];
        let mut live = false;
        for j in (0..f).rev() {
            live = live || self.cells[j].ops[selected[j]].kind() != FusionOpKind::Identity;
            run_block_2[j] = live;
        }
        run_block_2[0] = true;
        Ok(ExecutionPlan {
            selected: selected.to_vec(),
            run_block_2,
        })
    }

    /// Plan implied by a gate decision (errors on slot-count mismatch).
    pub fn decision_to_architecture(&self, decision: &GateDecision) -> Result<ExecutionPlan> {
        self.plan_for(&decision.selected)
    }

    /// Per-sample cost of everything the plan executes except the gate.
    fn body_cost(&self, plan: &ExecutionPlan, skip_dead: bool) -> u64 {
        let blocks_1: u64 = self.costs.block_costs[0].iter().sum();
        let blocks_2: u64 = self.costs.block_costs[1]
            .iter()
            .enumerate()
            .filter(|(j, _)| !skip_dead || plan.run_block_2[*j])
            .map(|(_, &c)| c)
            .sum();
        let ops: u64 = plan
            .selected
            .iter()
            .enumerate()
            .map(|(j, &i)| self.costs.op_costs[j][i])
            .sum();
        blocks_1 + blocks_2 + ops + self.costs.head_cost
    }

    /// Deployed per-sample cost of a hard decision, dead blocks skipped.
    pub fn plan_cost(&self, plan: &ExecutionPlan) -> u64 {
        self.costs.gate_cost + self.body_cost(plan, true)
    }

    /// Per-sample cost when every op and every block runs, weighted.
    fn soft_cost(&self) -> u64 {
        self.costs.gate_cost
            + self.costs.head_cost
            + self.costs.block_costs.iter().flatten().sum::<u64>()
            + self.costs.op_costs.iter().flatten().sum::<u64>()
    }

    fn leaf_inputs(&self, tape: &mut Tape, x1: &Tensor, x2: &Tensor) -> Result<(Value, Value, usize)> {
        let n = if x1.shape.len() == 2 { x1.shape[0] } else { 0 };
        if n == 0 || x1.shape != [n, self.config.modality_dims[0]] {
            return Err(Error::Dimension {
                what: "stream-1 block",
                expected: format!("[n ≥ 1, {}]", self.config.modality_dims[0]),
                got: format!("{:?}", x1.shape),
            });
        }
        if x2.shape != [n, self.config.modality_dims[1]] {
            return Err(Error::Dimension {
                what: "stream-2 block",
                expected: format!("[{n}, {}]", self.config.modality_dims[1]),
                got: format!("{:?}", x2.shape),
            });
        }
        Ok((tape.leaf(x1), tape.leaf(x2), n))
    }

    /// One feature block: linear then relu.
    fn block_forward(&self, tape: &mut Tape, chain: usize, j: usize, x: Value) -> Result<Value> {
        let blocks = if chain == 0 { &self.blocks_1 } else { &self.blocks_2 };
        let h = blocks[j].forward(&self.store, tape, x)?;
        Ok(tape.relu(h))
    }

    /// Deterministic grouping of samples by identical decision vectors.
    fn group_by_plan(&self, decisions: &[GateDecision]) -> Result<Vec<(Vec<usize>, ExecutionPlan)>> {
        let mut map: BTreeMap<Vec<usize>, Vec<usize>> = BTreeMap::new();
        for (s, d) in decisions.iter().enumerate() {
            map.entry(d.selected.clone()).or_default().push(s);
        }
        map.into_iter()
            .map(|(sel, idx)| Ok((idx, self.plan_for(&sel)?)))
            .collect()
    }

    /// Execute each group's plan on its sub-batch of the post-block-0
    /// streams and scatter the fused rows back into batch order. With
    /// `rows` present (straight-through training) every cell's fused output
    /// is scaled by the sample's gate value for the chosen op, which
    /// carries gradients into the gate.
    fn execute_groups(
        &self,
        tape: &mut Tape,
        s1_full: Value,
        s2_full: Value,
        groups: &[(Vec<usize>, ExecutionPlan)],
        rows: Option<&[Vec<Value>]>,
        skip_dead: bool,
    ) -> Result<Value> {
        let mut parts = Vec::with_capacity(groups.len());
        let mut maps = Vec::with_capacity(groups.len());
        for (idx, plan) in groups {
            let mut s1 = tape.gather_rows(s1_full, idx)?;
            let mut s2 = tape.gather_rows(s2_full, idx)?;
            for j in 0..self.cells.len() {
                if j > 0 {
                    s1 = self.block_forward(tape, 0, j, s1)?;
                    if !skip_dead || plan.run_block_2[j] {
                        s2 = self.block_forward(tape, 1, j, s2)?;
                    }
                }
                let op = &self.cells[j].ops[plan.selected[j]];
                let mut fused = op.forward(&self.store, tape, s1, s2)?;
                if let Some(rows) = rows {
                    let picks: Vec<(Value, usize)> =
                        idx.iter().map(|&s| (rows[s][j], plan.selected[j])).collect();
                    let col = tape.stack_selects(&picks)?;
                    fused = tape.mul_col(fused, col)?;
                }
                s1 = fused;
            }
            parts.push(s1);
            maps.push(idx.clone());
        }
        tape.assemble_rows(&parts, &maps)
    }

    /// Differentiable forward. `Soft` executes every op in every cell,
    /// mixed by the relaxed gate; `HardStraightThrough` executes one plan
    /// per sample with dead second-stream blocks skipped.
    pub fn forward_train(
        &self,
        x1: &Tensor,
        x2: &Tensor,
        mode: GateMode,
        tau: f64,
        rng: &mut impl Rng,
    ) -> Result<TrainForward> {
        if mode == GateMode::HardInference {
            return Err(Error::Config(
                "inference decisions carry no gradient; use forward_inference".into(),
            ));
        }
        let mut tape = Tape::new();
        let (l1, l2, n) = self.leaf_inputs(&mut tape, x1, x2)?;
        let s1 = self.block_forward(&mut tape, 0, 0, l1)?;
        let s2 = self.block_forward(&mut tape, 1, 0, l2)?;
        let feats = tape.concat(&[s1, s2], 1)?;
        let decisions = self.gate.forward(&self.store, &mut tape, feats, mode, tau, rng)?;
        let rows: Vec<Vec<Value>> = decisions.iter().map(|d| d.row_values.clone()).collect();

        let (fused, cost) = match mode {
            GateMode::HardStraightThrough => {
                let groups = self.group_by_plan(&decisions)?;
                let fused = self.execute_groups(&mut tape, s1, s2, &groups, Some(&rows), true)?;
                let cost = n as u64 * self.costs.gate_cost
                    + groups
                        .iter()
                        .map(|(idx, plan)| idx.len() as u64 * self.body_cost(plan, true))
                        .sum::<u64>();
                (fused, cost)
            }
            _ => {
                // Soft: every block and every op runs; per-sample mixing
                // weights come from the relaxed rows.
                let (mut a, mut b) = (s1, s2);
                for j in 0..self.cells.len() {
                    if j > 0 {
                        a = self.block_forward(&mut tape, 0, j, a)?;
                        b = self.block_forward(&mut tape, 1, j, b)?;
                    }
                    let mut acc: Option<Value> = None;
                    for (i, op) in self.cells[j].ops.iter().enumerate() {
                        let out = op.forward(&self.store, &mut tape, a, b)?;
                        let picks: Vec<(Value, usize)> =
                            rows.iter().map(|r| (r[j], i)).collect();
                        let col = tape.stack_selects(&picks)?;
                        let scaled = tape.mul_col(out, col)?;
                        acc = Some(match acc {
                            Some(prev) => tape.add(prev, scaled)?,
                            None => scaled,
                        });
                    }
                    a = acc.expect("every cell has at least two ops");
                }
                (a, n as u64 * self.soft_cost())
            }
        };
        let output = self.head.forward(&self.store, &mut tape, fused)?;
        Ok(TrainForward {
            tape,
            output,
            decisions,
            cost,
        })
    }

    /// Forward the whole batch under one caller-fixed decision vector
    /// (random pretraining plans, static baselines, probes). The gate never
    /// runs and is not billed.
    pub fn forward_forced(&self, x1: &Tensor, x2: &Tensor, selected: &[usize]) -> Result<TrainForward> {
        let plan = self.plan_for(selected)?;
        let mut tape = Tape::new();
        let (l1, l2, n) = self.leaf_inputs(&mut tape, x1, x2)?;
        let s1 = self.block_forward(&mut tape, 0, 0, l1)?;
        let s2 = self.block_forward(&mut tape, 1, 0, l2)?;
        let groups = vec![((0..n).collect::<Vec<_>>(), plan.clone())];
        let fused = self.execute_groups(&mut tape, s1, s2, &groups, None, true)?;
        let output = self.head.forward(&self.store, &mut tape, fused)?;
        let decisions = (0..n)
            .map(|_| GateDecision::forced(selected.to_vec(), self.branches()))
            .collect();
        Ok(TrainForward {
            tape,
            output,
            decisions,
            cost: n as u64 * self.body_cost(&plan, true),
        })
    }

    /// Deployed forward: noise-free hard decisions. With `skip_dead` the
    /// dead second-stream suffix is neither executed nor billed; without it
    /// everything runs (and is billed) and the dead results are discarded —
    /// the outputs are identical either way.
    pub fn forward_inference(&self, x1: &Tensor, x2: &Tensor, skip_dead: bool) -> Result<InferenceResult> {
        let mut tape = Tape::new();
        let (l1, l2, n) = self.leaf_inputs(&mut tape, x1, x2)?;
        let s1 = self.block_forward(&mut tape, 0, 0, l1)?;
        let s2 = self.block_forward(&mut tape, 1, 0, l2)?;
        let feats = tape.concat(&[s1, s2], 1)?;
        // Inference never draws noise; the RNG argument is a formality.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let decisions =
            self.gate
                .forward(&self.store, &mut tape, feats, GateMode::HardInference, 1.0, &mut rng)?;
        let groups = self.group_by_plan(&decisions)?;
        let fused = self.execute_groups(&mut tape, s1, s2, &groups, None, skip_dead)?;
        let output = self.head.forward(&self.store, &mut tape, fused)?;
        let outputs = tape.rows(output)?;
        let cost = n as u64 * self.costs.gate_cost
            + groups
                .iter()
                .map(|(idx, plan)| idx.len() as u64 * self.body_cost(plan, skip_dead))
                .sum::<u64>();
        Ok(InferenceResult {
            outputs,
            decisions,
            cost,
            counted: tape.madds(),
        })
    }
}

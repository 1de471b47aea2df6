//! Multiply-accumulate cost model and the resource-aware loss.
//!
//! Counting convention (shared with the tape's runtime counter):
//! * linear layer: `in_dim × out_dim` per sample — bias adds are excluded;
//! * elementwise add/mul over `d` elements: `d`;
//! * learned weighted add: `3d` (two scaling multiplies plus the add);
//! * squeeze-excitation fusion: both bottleneck MLPs plus `2d` gating
//!   multiplies plus `d` for the final add;
//! * identity, activations, softmax, argmax, concatenation: free.
//!
//! Tables are computed once from the architecture in closed form and stay
//! constant for the model's lifetime. A forward pass on the tape counts the
//! same convention op by op as it executes, so `Tape::madds()` must agree
//! with the table exactly — that audit is what keeps reported costs honest.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Value};

/// Per-component MAdds for one model, fixed at construction.
///
/// `expert_costs` is indexed by branch for a branch-routed model. For a
/// cell-routed model, `op_costs[cell][op]` prices each candidate fusion op
/// and `block_costs[modality][block]` prices the backbone blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTable {
    pub expert_costs: Vec<u64>,
    pub op_costs: Vec<Vec<u64>>,
    pub block_costs: Vec<Vec<u64>>,
    pub gate_cost: u64,
    pub head_cost: u64,
}

impl CostTable {
    pub fn for_experts(expert_costs: Vec<u64>, gate_cost: u64) -> Self {
        CostTable {
            expert_costs,
            op_costs: Vec::new(),
            block_costs: Vec::new(),
            gate_cost,
            head_cost: 0,
        }
    }

    pub fn for_fusion(
        block_costs: Vec<Vec<u64>>,
        op_costs: Vec<Vec<u64>>,
        gate_cost: u64,
        head_cost: u64,
    ) -> Self {
        CostTable {
            expert_costs: Vec::new(),
            op_costs,
            block_costs,
            gate_cost,
            head_cost,
        }
    }

    /// Stable fingerprint, used to assert the table never changes after
    /// construction.
    pub fn digest(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.expert_costs.hash(&mut h);
        self.op_costs.hash(&mut h);
        self.block_costs.hash(&mut h);
        self.gate_cost.hash(&mut h);
        self.head_cost.hash(&mut h);
        h.finish()
    }
}

/// How raw MAdds are scaled inside the resource loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CostNormalization {
    /// Use raw MAdds.
    None,
    /// Divide by the cheapest strictly positive branch cost, so the
    /// cheapest branch contributes exactly `lambda` per sample.
    #[default]
    CheapestExpert,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResourceLossConfig {
    pub lambda: f64,
    pub normalization: CostNormalization,
}

impl Default for ResourceLossConfig {
    fn default() -> Self {
        ResourceLossConfig {
            lambda: 0.0,
            normalization: CostNormalization::CheapestExpert,
        }
    }
}

/// Scale a cost vector according to the configured normalization.
///
/// With `CheapestExpert`, the divisor is the smallest strictly positive
/// entry (free ops such as identity stay at zero); if every entry is zero
/// the costs are returned unchanged.
pub fn normalized_costs(costs: &[u64], normalization: CostNormalization) -> Vec<f64> {
    let raw: Vec<f64> = costs.iter().map(|&c| c as f64).collect();
    match normalization {
        CostNormalization::None => raw,
        CostNormalization::CheapestExpert => {
            let min_pos = raw.iter().copied().filter(|&c| c > 0.0).fold(f64::INFINITY, f64::min);
            if min_pos.is_finite() {
                raw.iter().map(|c| c / min_pos).collect()
            } else {
                raw
            }
        }
    }
}

/// Resource term for one batch of branch-level decision rows:
/// `lambda · mean_over_batch( Σ_i g_i · Ĉ_i )`, recorded on the tape so the
/// gate receives its gradient. `rows` are the per-sample decision rows a
/// training loss consumes (straight-through hard rows or soft rows).
pub fn resource_loss(
    tape: &mut Tape,
    rows: &[Value],
    costs: &[u64],
    cfg: &ResourceLossConfig,
) -> Result<Value> {
    if rows.is_empty() {
        return Err(Error::Dimension {
            what: "resource_loss",
            expected: "at least one decision row".into(),
            got: "0".into(),
        });
    }
    let scaled = normalized_costs(costs, cfg.normalization);
    let stacked = tape.stack_rows(rows)?;
    let cost_row = tape.constant(vec![scaled.len()], scaled)?;
    let weighted = tape.mul_row_broadcast(stacked, cost_row)?;
    let total = tape.sum(weighted, None)?;
    Ok(tape.mul_scalar(total, cfg.lambda / rows.len() as f64))
}

/// Resource term for cell-level decisions: the per-cell rows of every
/// sample, `lambda · mean_over_batch( Σ_cells Σ_i g_i^(cell) · Ĉ(op_i) )`.
/// Normalization shares one divisor across all cells.
pub fn resource_loss_cells(
    tape: &mut Tape,
    per_sample_rows: &[Vec<Value>],
    op_costs: &[Vec<u64>],
    cfg: &ResourceLossConfig,
) -> Result<Value> {
    if per_sample_rows.is_empty() {
        return Err(Error::Dimension {
            what: "resource_loss_cells",
            expected: "at least one sample".into(),
            got: "0".into(),
        });
    }
    // One shared divisor: cheapest positive op cost anywhere in the table.
    let all: Vec<u64> = op_costs.iter().flatten().copied().collect();
    let scale = {
        let normalized = normalized_costs(&all, cfg.normalization);
        let mut it = normalized.into_iter();
        let mut scaled = Vec::with_capacity(op_costs.len());
        for cell in op_costs {
            scaled.push(cell.iter().map(|_| it.next().unwrap()).collect::<Vec<f64>>());
        }
        scaled
    };
    let n_cells = op_costs.len();
    let mut cell_terms = Vec::with_capacity(n_cells);
    for (cell, costs) in scale.iter().enumerate() {
        let rows: Vec<Value> = per_sample_rows.iter().map(|r| r[cell]).collect();
        let stacked = tape.stack_rows(&rows)?;
        let cost_row = tape.constant(vec![costs.len()], costs.clone())?;
        let weighted = tape.mul_row_broadcast(stacked, cost_row)?;
        cell_terms.push(tape.sum(weighted, None)?);
    }
    let mut total = cell_terms[0];
    for &t in &cell_terms[1..] {
        total = tape.add(total, t)?;
    }
    Ok(tape.mul_scalar(total, cfg.lambda / per_sample_rows.len() as f64))
}

/// Combined objective: `task + resource`, both already on the tape.
pub fn total_loss(tape: &mut Tape, task: Value, resource: Value) -> Result<Value> {
    tape.add(task, resource)
}

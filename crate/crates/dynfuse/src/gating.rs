//! Learned branch selection: Gumbel-softmax relaxation, straight-through
//! hardening, temperature annealing, and the gate network itself.
//!
//! A gate produces, per sample, one decision row per *slot* (one slot for a
//! branch-level model, one per fusion cell for a cell-level model). Each row
//! is a distribution over `branches` choices. Training uses either the soft
//! relaxed rows or straight-through hard rows; inference always uses
//! noise-free hard argmax decisions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, ParamId, ParamStore};
use crate::tensor::{argmax, Tape, Tensor, Value};

/// One draw per element from Gumbel(0, 1) via `-ln(-ln u)`, with `u`
/// clamped away from 0 and 1 so the result is always finite.
pub fn sample_gumbel<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor { shape, data, requires_grad: false, grad: None }
}

/// Relaxed decision row: `softmax((logits + gumbel) / tau)`.
///
/// `gumbel` may be zeros for a noise-free row. Temperature must be positive.
pub fn soft_gate(tape: &mut Tape, logits: Value, gumbel: &Tensor, tau: f64) -> Result<Value> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidTemperature(tau));
    }
    let g = tape.leaf(gumbel);
    let shifted = tape.add(logits, g)?;
    let scaled = tape.mul_scalar(shifted, 1.0 / tau);
    tape.softmax(scaled, 0)
}

/// How a gate decision is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Relaxed rows with Gumbel noise; every branch executes, weighted.
    Soft,
    /// Hard one-hot forward (with Gumbel exploration noise), identity
    /// backward onto the soft row.
    HardStraightThrough,
    /// Noise-free argmax; used for every evaluation.
    HardInference,
}

/// Per-sample gate output: one decision row per slot.
#[derive(Debug, Clone)]
pub struct GateDecision {
    pub mode: GateMode,
    /// Relaxed probabilities, `slots × branches`.
    pub soft: Vec<Vec<f64>>,
    /// One-hot rows (equal to `soft` values only in soft mode).
    pub hard: Vec<Vec<f64>>,
    /// Argmax of each row; ties resolve to the lowest index.
    pub selected: Vec<usize>,
    /// Tape handles for the rows a training loss should consume
    /// (straight-through hard rows, or the soft rows in soft mode).
    /// Empty for inference decisions.
    pub row_values: Vec<Value>,
}

impl GateDecision {
    /// A fixed decision that did not come from a gate (static baselines,
    /// random pretraining decisions, forced-path probes).
    pub fn forced(selected: Vec<usize>, branches: usize) -> Self {
        let hard: Vec<Vec<f64>> = selected
            .iter()
            .map(|&s| {
                let mut row = vec![0.0; branches];
                row[s] = 1.0;
                row
            })
            .collect();
        GateDecision {
            mode: GateMode::HardInference,
            soft: hard.clone(),
            hard,
            selected,
            row_values: Vec::new(),
        }
    }
}

/// Exponential temperature decay `tau0 · (tauT / tau0)^(epoch / total)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    pub tau0: f64,
    pub tau_final: f64,
    pub total_epochs: usize,
}

impl Default for AnnealSchedule {
    fn default() -> Self {
        AnnealSchedule { tau0: 1.0, tau_final: 1e-4, total_epochs: 500 }
    }
}

impl AnnealSchedule {
    /// Temperature at `epoch ∈ [0, total_epochs]`. Hits both endpoints.
    pub fn tau(&self, epoch: usize) -> Result<f64> {
        if epoch > self.total_epochs {
            return Err(Error::EpochOutOfRange { epoch, total: self.total_epochs });
        }
        if self.total_epochs == 0 {
            return Ok(self.tau0);
        }
        let frac = epoch as f64 / self.total_epochs as f64;
        Ok(self.tau0 * (self.tau_final / self.tau0).powf(frac))
    }
}

/// Small MLP mapping concatenated features to `slots × branches` logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateNetwork {
    pub body: Mlp,
    pub slots: usize,
    pub branches: usize,
}

impl GateNetwork {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        slots: usize,
        branches: usize,
    ) -> Result<Self> {
        let body = Mlp::new(store, name, &[in_dim, hidden, slots * branches], Activation::Relu)?;
        Ok(GateNetwork { body, slots, branches })
    }

    pub fn madds(&self) -> u64 {
        self.body.madds()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.body.param_ids()
    }

    /// Run the gate on a `[batch × in_dim]` feature block and produce one
    /// decision per sample. `rng` supplies Gumbel noise and is only touched
    /// in the two training modes.
    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        features: Value,
        mode: GateMode,
        tau: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<GateDecision>> {
        let logits = self.body.forward(store, tape, features)?;
        let batch = tape.shape(logits)[0];
        let mut decisions = Vec::with_capacity(batch);
        for i in 0..batch {
            let row = tape.slice_row(logits, i)?;
            let mut soft = Vec::with_capacity(self.slots);
            let mut hard = Vec::with_capacity(self.slots);
            let mut selected = Vec::with_capacity(self.slots);
            let mut row_values = Vec::with_capacity(self.slots);
            for s in 0..self.slots {
                let slot_logits = tape.slice_1d(row, s * self.branches, self.branches)?;
                match mode {
                    GateMode::HardInference => {
                        // Pure argmax; the softmax here is only reported for
                        // inspection and charges no cost.
                        let soft_row = tape.softmax(slot_logits, 0)?;
                        let probs = tape.data(soft_row).to_vec();
                        let sel = argmax(&probs);
                        let mut h = vec![0.0; self.branches];
                        h[sel] = 1.0;
                        soft.push(probs);
                        hard.push(h);
                        selected.push(sel);
                    }
                    GateMode::Soft | GateMode::HardStraightThrough => {
                        let noise = sample_gumbel(vec![self.branches], rng);
                        let soft_row = soft_gate(tape, slot_logits, &noise, tau)?;
                        let probs = tape.data(soft_row).to_vec();
                        let sel = argmax(&probs);
                        let mut h = vec![0.0; self.branches];
                        h[sel] = 1.0;
                        if mode == GateMode::HardStraightThrough {
                            let hard_row = tape.straight_through(soft_row)?;
                            row_values.push(hard_row);
                        } else {
                            row_values.push(soft_row);
                        }
                        soft.push(probs);
                        hard.push(h);
                        selected.push(sel);
                    }
                }
            }
            decisions.push(GateDecision { mode, soft, hard, selected, row_values });
        }
        Ok(decisions)
    }
}

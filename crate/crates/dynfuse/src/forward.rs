//! Result types shared by the two routed model families.
//!
//! Training-time forwards hand back the live tape so the caller can attach
//! a loss and run backward; inference forwards hand back plain data plus
//! the tape's multiply-accumulate count so cost reporting stays auditable.

use crate::gating::GateDecision;
use crate::tensor::{Tape, Value};

/// Result of a differentiable forward pass (training or forced paths).
pub struct TrainForward {
    pub tape: Tape,
    /// Batch logits `[n × classes]` in original sample order.
    pub output: Value,
    /// One decision per sample; training modes carry live row handles.
    pub decisions: Vec<GateDecision>,
    /// Analytic batch cost the table assigns to these decisions.
    pub cost: u64,
}

/// Result of an inference pass, with the instrumentation needed to audit it.
#[derive(Debug, Clone)]
pub struct InferenceResult {
    /// Per-sample output logits.
    pub outputs: Vec<Vec<f64>>,
    pub decisions: Vec<GateDecision>,
    /// Analytic batch cost from the cost table.
    pub cost: u64,
    /// Multiply-accumulates the tape actually counted; equals `cost`.
    pub counted: u64,
}

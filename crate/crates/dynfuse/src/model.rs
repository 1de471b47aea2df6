//! One handle over both routed architectures.
//!
//! The branch-routed mixture (one gate slot choosing an expert) and the
//! cell-routed fusion network (one slot per fusion cell) share the training
//! loop, checkpoint format, and experiment harness. `Model` dispatches the
//! handful of operations those layers need without flattening the two
//! designs into one another.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cost::{resource_loss, resource_loss_cells, CostTable, ResourceLossConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::forward::{InferenceResult, TrainForward};
use crate::fusion::{FusionConfig, FusionNetwork};
use crate::gating::{GateDecision, GateMode};
use crate::moe::{InferencePolicy, ModalityMoe, MoeConfig};
use crate::nn::{ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Value};

/// Architecture selector plus its full configuration, as one JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "architecture", rename_all = "snake_case")]
pub enum ModelConfig {
    ModalityMoe(MoeConfig),
    FusionNet(FusionConfig),
}

impl ModelConfig {
    pub fn kind_name(&self) -> &'static str {
        match self {
            ModelConfig::ModalityMoe(_) => "modality_moe",
            ModelConfig::FusionNet(_) => "fusion_net",
        }
    }
}

/// Either routed architecture, behind one face.
#[derive(Debug, Clone)]
pub enum Model {
    Moe(ModalityMoe),
    Fusion(FusionNetwork),
}

impl Model {
    pub fn build(config: &ModelConfig) -> Result<Model> {
        Ok(match config {
            ModelConfig::ModalityMoe(c) => Model::Moe(ModalityMoe::new(c)?),
            ModelConfig::FusionNet(c) => Model::Fusion(FusionNetwork::new(c)?),
        })
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Model::Moe(m) => ModelConfig::ModalityMoe(m.config.clone()),
            Model::Fusion(f) => ModelConfig::FusionNet(f.config.clone()),
        }
    }

    pub fn init(&mut self, seed: u64) {
        match self {
            Model::Moe(m) => m.init(seed),
            Model::Fusion(f) => f.init(seed),
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Model::Moe(m) => &m.store,
            Model::Fusion(f) => &f.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Moe(m) => &mut m.store,
            Model::Fusion(f) => &mut f.store,
        }
    }

    pub fn cost_table(&self) -> &CostTable {
        match self {
            Model::Moe(m) => &m.costs,
            Model::Fusion(f) => &f.costs,
        }
    }

    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        match self {
            Model::Moe(m) => m.backbone_param_ids(),
            Model::Fusion(f) => f.backbone_param_ids(),
        }
    }

    pub fn gate_param_ids(&self) -> Vec<ParamId> {
        match self {
            Model::Moe(m) => m.gate_param_ids(),
            Model::Fusion(f) => f.gate_param_ids(),
        }
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        (0..self.store().len()).collect()
    }

    /// Input streams the model consumes.
    pub fn modalities(&self) -> usize {
        match self {
            Model::Moe(m) => m.modalities(),
            Model::Fusion(_) => 2,
        }
    }

    /// Width of the output head: class count for classification, 1 for
    /// binary-logit or regression heads.
    pub fn classes(&self) -> usize {
        match self {
            Model::Moe(m) => m.config.classes,
            Model::Fusion(f) => f.config.classes,
        }
    }

    /// Decision slots the gate emits per sample.
    pub fn slots(&self) -> usize {
        match self {
            Model::Moe(_) => 1,
            Model::Fusion(f) => f.cell_count(),
        }
    }

    /// Choices per decision slot.
    pub fn branches(&self) -> usize {
        match self {
            Model::Moe(m) => m.branches(),
            Model::Fusion(f) => f.branches(),
        }
    }

    /// Human-readable name per slot per branch, for reports.
    pub fn branch_labels(&self) -> Vec<Vec<String>> {
        match self {
            Model::Moe(m) => {
                let names = m
                    .experts
                    .iter()
                    .map(|e| {
                        let mods: Vec<String> =
                            e.modality_subset.iter().map(|m| format!("m{}", m + 1)).collect();
                        format!("expert{}[{}]", e.id + 1, mods.join("+"))
                    })
                    .collect();
                vec![names]
            }
            Model::Fusion(f) => f
                .cells
                .iter()
                .map(|c| {
                    c.ops
                        .iter()
                        .map(|op| format!("{:?}", op.kind()).to_lowercase())
                        .collect()
                })
                .collect(),
        }
    }

    /// Pull the model's input tensors (one per modality) out of a dataset.
    pub fn inputs_from(&self, set: &Dataset, idx: &[usize]) -> Result<Vec<Tensor>> {
        if set.modalities() != self.modalities() {
            return Err(Error::Dimension {
                what: "dataset modalities",
                expected: format!("{}", self.modalities()),
                got: format!("{}", set.modalities()),
            });
        }
        (0..self.modalities()).map(|m| set.modality_rows(m, idx)).collect()
    }

    /// Differentiable forward in either training mode.
    pub fn forward_train(
        &self,
        inputs: &[Tensor],
        mode: GateMode,
        tau: f64,
        rng: &mut impl Rng,
    ) -> Result<TrainForward> {
        match self {
            Model::Moe(m) => m.forward_train(inputs, mode, tau, rng),
            Model::Fusion(f) => f.forward_train(&inputs[0], &inputs[1], mode, tau, rng),
        }
    }

    /// Forward the whole batch under one fixed decision vector (length =
    /// `slots()`): static baselines, random pretraining plans, probes. No
    /// gate runs, none is billed.
    pub fn forward_plan(&self, inputs: &[Tensor], plan: &[usize]) -> Result<TrainForward> {
        match self {
            Model::Moe(m) => {
                if plan.len() != 1 {
                    return Err(Error::Dimension {
                        what: "decision slots",
                        expected: "1".into(),
                        got: format!("{}", plan.len()),
                    });
                }
                let n = if inputs.is_empty() { 0 } else { inputs[0].shape[0] };
                m.forward_forced(inputs, &vec![plan[0]; n])
            }
            Model::Fusion(f) => f.forward_forced(&inputs[0], &inputs[1], plan),
        }
    }

    /// Deployed forward. Cell-routed models only support hard decisions;
    /// probability-weighted execution of a fusion cell's whole menu is a
    /// training device, not an inference mode.
    pub fn forward_inference(
        &self,
        inputs: &[Tensor],
        policy: InferencePolicy,
    ) -> Result<InferenceResult> {
        match (self, policy) {
            (Model::Moe(m), p) => m.forward_inference(inputs, p),
            (Model::Fusion(f), InferencePolicy::Hard) => {
                f.forward_inference(&inputs[0], &inputs[1], true)
            }
            (Model::Fusion(_), InferencePolicy::Soft { .. }) => Err(Error::Config(
                "cell-routed models deploy with hard decisions only".into(),
            )),
        }
    }

    /// The resource term for one training batch, on the batch's tape.
    pub fn resource_term(
        &self,
        tape: &mut Tape,
        decisions: &[GateDecision],
        cfg: &ResourceLossConfig,
    ) -> Result<Value> {
        match self {
            Model::Moe(m) => {
                let rows: Vec<Value> = decisions.iter().map(|d| d.row_values[0]).collect();
                resource_loss(tape, &rows, &m.costs.expert_costs, cfg)
            }
            Model::Fusion(f) => {
                let rows: Vec<Vec<Value>> =
                    decisions.iter().map(|d| d.row_values.clone()).collect();
                resource_loss_cells(tape, &rows, &f.costs.op_costs, cfg)
            }
        }
    }

    /// Deployed per-sample cost of one decision vector, gate included.
    pub fn decision_cost(&self, selected: &[usize]) -> Result<u64> {
        match self {
            Model::Moe(m) => {
                if selected.len() != 1 || selected[0] >= m.branches() {
                    return Err(Error::Dimension {
                        what: "decision",
                        expected: format!("1 slot over {} branches", m.branches()),
                        got: format!("{selected:?}"),
                    });
                }
                Ok(m.decision_cost(selected[0]))
            }
            Model::Fusion(f) => Ok(f.plan_cost(&f.plan_for(selected)?)),
        }
    }

    /// Per-slot cost of each branch, as the routing reports price it.
    fn slot_costs(&self) -> Vec<Vec<u64>> {
        match self {
            Model::Moe(m) => vec![m.costs.expert_costs.clone()],
            Model::Fusion(f) => f.costs.op_costs.clone(),
        }
    }

    /// The decision vector picking the cheapest branch in every slot
    /// (lowest index on ties).
    pub fn cheapest_decision(&self) -> Vec<usize> {
        self.slot_costs()
            .iter()
            .map(|costs| {
                costs
                    .iter()
                    .enumerate()
                    .min_by_key(|(_, &c)| c)
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }

    /// The decision vector picking the costliest branch in every slot —
    /// the always-multimodal execution a static baseline represents.
    pub fn costliest_decision(&self) -> Vec<usize> {
        self.slot_costs()
            .iter()
            .map(|costs| {
                costs
                    .iter()
                    .enumerate()
                    .max_by_key(|(_, &c)| c)
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }

    /// Named static execution plans trained and evaluated alongside the
    /// dynamic model: the cheapest path and the always-multimodal path.
    pub fn static_baselines(&self) -> Vec<(&'static str, Vec<usize>)> {
        match self {
            Model::Moe(_) => vec![
                ("static_cheap", self.cheapest_decision()),
                ("static_full", self.costliest_decision()),
            ],
            Model::Fusion(_) => vec![
                ("static_no_fuse", self.cheapest_decision()),
                ("static_all_fuse", self.costliest_decision()),
            ],
        }
    }
}

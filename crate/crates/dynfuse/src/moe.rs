//! Branch-level dynamic model: a library of expert networks over modality
//! subsets plus a gate that activates exactly one expert per sample.
//!
//! Routing is per sample within a batch. The gate runs on the whole batch,
//! samples are grouped into one sub-batch per selected expert, each selected
//! expert runs once on its sub-batch, and the rows are scattered back into
//! batch order. Hard execution therefore pays for the gate plus the selected
//! expert only; soft execution runs (and is billed for) every expert.
//!
//! During straight-through training the per-sample expert output is scaled
//! by the sample's hard gate value (exactly 1.0 in the forward pass), which
//! is what routes task-loss gradients back into the gate logits. At
//! inference that scaling is pure bookkeeping, so it happens off the tape
//! and the tape's multiply-accumulate counter equals the analytic cost
//! table exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cost::CostTable;
use crate::error::{Error, Result};
use crate::forward::{InferenceResult, TrainForward};
use crate::gating::{GateDecision, GateMode, GateNetwork};
use crate::nn::{Activation, Mlp, ParamId, ParamStore};
use crate::tensor::{argmax, softmax_lane, Tape, Tensor, Value};

/// Where the gate reads its features from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateInput {
    /// Concatenated raw modality features.
    Raw,
    /// Concatenated outputs of small gate-owned per-modality encoders;
    /// their cost is charged to the gate.
    Encoded { encoder_dim: usize },
}

/// Architecture of one expert inside a [`MoeConfig`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertConfig {
    /// Modalities this expert consumes (0-based, strictly increasing).
    pub modality_subset: Vec<usize>,
    /// Output width of each per-modality encoder.
    pub encoder_dim: usize,
    /// Hidden width of the decoder MLP.
    pub decoder_hidden: usize,
}

/// Architecture of a whole branch-level model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub modality_dims: Vec<usize>,
    pub classes: usize,
    pub experts: Vec<ExpertConfig>,
    pub gate_hidden: usize,
    pub gate_input: GateInput,
}

impl MoeConfig {
    /// The canonical two-expert layout: a cheap expert reading only
    /// modality 0 and a late-fusion expert encoding every modality, with a
    /// small gate on the raw concatenated features.
    pub fn two_expert(modality_dims: Vec<usize>, classes: usize) -> Result<Self> {
        if modality_dims.len() < 2 {
            return Err(Error::Config(format!(
                "two-expert model needs at least 2 modalities, got {}",
                modality_dims.len()
            )));
        }
        let all: Vec<usize> = (0..modality_dims.len()).collect();
        Ok(MoeConfig {
            modality_dims,
            classes,
            experts: vec![
                ExpertConfig {
                    modality_subset: vec![0],
                    encoder_dim: 16,
                    decoder_hidden: 16,
                },
                ExpertConfig {
                    modality_subset: all,
                    encoder_dim: 64,
                    decoder_hidden: 64,
                },
            ],
            gate_hidden: 16,
            gate_input: GateInput::Raw,
        })
    }
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self::two_expert(vec![32, 32], 2).expect("static default is valid")
    }
}

/// Convenience wrapper building the canonical cheap-vs-late-fusion pair.
pub fn build_two_expert_model(modality_dims: Vec<usize>, classes: usize) -> Result<ModalityMoe> {
    ModalityMoe::new(&MoeConfig::two_expert(modality_dims, classes)?)
}

/// All non-empty subsets of `0..m` in bitmask order (`2^m − 1` of them);
/// feeding these to [`ExpertConfig`] yields the full expert library.
pub fn enumerate_subsets(m: usize) -> Vec<Vec<usize>> {
    (1usize..1 << m)
        .map(|mask| (0..m).filter(|&i| mask >> i & 1 == 1).collect())
        .collect()
}

/// One expert: an encoder per subscribed modality, concatenation, and a
/// decoder MLP producing class logits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpertSpec {
    pub id: usize,
    pub modality_subset: Vec<usize>,
    pub encoders: Vec<Mlp>,
    pub decoder: Mlp,
    /// Analytic multiply-accumulates per sample (all encoders + decoder).
    pub cost_madds: u64,
}

impl ExpertSpec {
    fn new(
        store: &mut ParamStore,
        id: usize,
        cfg: &ExpertConfig,
        modality_dims: &[usize],
        classes: usize,
    ) -> Result<Self> {
        let subset = &cfg.modality_subset;
        if subset.is_empty() {
            return Err(Error::Config(format!("expert {id} has an empty modality subset")));
        }
        if subset.windows(2).any(|w| w[0] >= w[1]) || *subset.last().unwrap() >= modality_dims.len() {
            return Err(Error::Config(format!(
                "expert {id} subset {subset:?} must be strictly increasing within 0..{}",
                modality_dims.len()
            )));
        }
        if cfg.encoder_dim == 0 || cfg.decoder_hidden == 0 {
            return Err(Error::Config(format!("expert {id} needs positive layer widths")));
        }
        let encoders = subset
            .iter()
            .map(|&m| {
                Mlp::new(
                    store,
                    &format!("expert{id}.enc{m}"),
                    &[modality_dims[m], cfg.encoder_dim],
                    Activation::Relu,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let decoder = Mlp::new(
            store,
            &format!("expert{id}.dec"),
            &[subset.len() * cfg.encoder_dim, cfg.decoder_hidden, classes],
            Activation::Relu,
        )?;
        let cost_madds = encoders.iter().map(Mlp::madds).sum::<u64>() + decoder.madds();
        Ok(ExpertSpec {
            id,
            modality_subset: subset.clone(),
            encoders,
            decoder,
            cost_madds,
        })
    }

    /// Forward one feature block per subscribed modality, in subset order.
    /// All blocks must share a batch size.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, inputs: &[Value]) -> Result<Value> {
        if inputs.len() != self.encoders.len() {
            return Err(Error::Dimension {
                what: "expert inputs",
                expected: format!("{} modality blocks", self.encoders.len()),
                got: format!("{}", inputs.len()),
            });
        }
        let mut encoded = Vec::with_capacity(inputs.len());
        for (enc, &x) in self.encoders.iter().zip(inputs) {
            let h = enc.forward(store, tape, x)?;
            encoded.push(tape.relu(h));
        }
        let fused = if encoded.len() == 1 {
            encoded[0]
        } else {
            tape.concat(&encoded, 1)?
        };
        self.decoder.forward(store, tape, fused)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.encoders.iter().flat_map(Mlp::param_ids).collect();
        ids.extend(self.decoder.param_ids());
        ids
    }
}

/// How a deployed model makes decisions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferencePolicy {
    /// Noise-free argmax; executes one expert per sample.
    Hard,
    /// Noise-free relaxed weighting at the given temperature; executes all
    /// experts and mixes their outputs.
    Soft { tau: f64 },
}

/// The routed model: experts, gate, and the cost table that prices them.
#[derive(Debug, Clone)]
pub struct ModalityMoe {
    pub config: MoeConfig,
    pub store: ParamStore,
    pub experts: Vec<ExpertSpec>,
    pub gate: GateNetwork,
    /// Per-modality encoders owned by the gate in `GateInput::Encoded` mode.
    pub gate_encoders: Vec<Mlp>,
    pub costs: CostTable,
}

impl ModalityMoe {
    pub fn new(config: &MoeConfig) -> Result<Self> {
        let m = config.modality_dims.len();
        if m == 0 || config.modality_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(
                "model needs at least one modality with a positive feature dim".into(),
            ));
        }
        if config.experts.len() < 2 {
            return Err(Error::Config(format!(
                "a routed model needs at least 2 experts, got {}",
                config.experts.len()
            )));
        }
        if config.classes == 0 {
            return Err(Error::Config(
                "output head needs a positive width (classes, or 1 for regression)".into(),
            ));
        }
        let mut store = ParamStore::new();
        let experts = config
            .experts
            .iter()
            .enumerate()
            .map(|(id, ec)| ExpertSpec::new(&mut store, id, ec, &config.modality_dims, config.classes))
            .collect::<Result<Vec<_>>>()?;
        let (gate_encoders, gate_in) = match config.gate_input {
            GateInput::Raw => (Vec::new(), config.modality_dims.iter().sum()),
            GateInput::Encoded { encoder_dim } => {
                if encoder_dim == 0 {
                    return Err(Error::Config("gate encoder width must be positive".into()));
                }
                let encs = (0..m)
                    .map(|i| {
                        Mlp::new(
                            &mut store,
                            &format!("gate.enc{i}"),
                            &[config.modality_dims[i], encoder_dim],
                            Activation::Relu,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                (encs, m * encoder_dim)
            }
        };
        let gate = GateNetwork::new(&mut store, "gate", gate_in, config.gate_hidden, 1, experts.len())?;
        let gate_cost = gate.madds() + gate_encoders.iter().map(Mlp::madds).sum::<u64>();
        let costs = CostTable::for_experts(experts.iter().map(|e| e.cost_madds).collect(), gate_cost);
        Ok(ModalityMoe {
            config: config.clone(),
            store,
            experts,
            gate,
            gate_encoders,
            costs,
        })
    }

    pub fn modalities(&self) -> usize {
        self.config.modality_dims.len()
    }

    pub fn branches(&self) -> usize {
        self.experts.len()
    }

    /// Draw every parameter from the given seed.
    pub fn init(&mut self, seed: u64) {
        self.store.init(seed);
    }

    /// Table cost of one gated hard decision for one sample.
    pub fn decision_cost(&self, selected: usize) -> u64 {
        self.costs.gate_cost + self.costs.expert_costs[selected]
    }

    /// Parameters of every expert (the branch networks).
    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        self.experts.iter().flat_map(ExpertSpec::param_ids).collect()
    }

    /// Parameters of the gate, including any gate-owned encoders.
    pub fn gate_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.gate.param_ids();
        ids.extend(self.gate_encoders.iter().flat_map(Mlp::param_ids));
        ids
    }

    /// Validate a batch and leaf every modality block onto the tape.
    fn leaf_inputs(&self, tape: &mut Tape, x: &[Tensor]) -> Result<(Vec<Value>, usize)> {
        if x.len() != self.modalities() {
            return Err(Error::Dimension {
                what: "modality blocks",
                expected: format!("{}", self.modalities()),
                got: format!("{}", x.len()),
            });
        }
        let n = if x[0].shape.len() == 2 { x[0].shape[0] } else { 0 };
        if n == 0 {
            return Err(Error::Dimension {
                what: "modality batch",
                expected: "a non-empty 2-d block".into(),
                got: format!("shape {:?}", x[0].shape),
            });
        }
        for (m, block) in x.iter().enumerate() {
            if block.shape != [n, self.config.modality_dims[m]] {
                return Err(Error::Dimension {
                    what: "modality block",
                    expected: format!("[{n}, {}]", self.config.modality_dims[m]),
                    got: format!("{:?}", block.shape),
                });
            }
        }
        Ok((x.iter().map(|t| tape.leaf(t)).collect(), n))
    }

    /// Gate input features for a batch already on the tape.
    fn gate_features(&self, tape: &mut Tape, leaves: &[Value]) -> Result<Value> {
        match self.config.gate_input {
            GateInput::Raw => {
                if leaves.len() == 1 {
                    Ok(leaves[0])
                } else {
                    tape.concat(leaves, 1)
                }
            }
            GateInput::Encoded { .. } => {
                let mut encoded = Vec::with_capacity(leaves.len());
                for (enc, &x) in self.gate_encoders.iter().zip(leaves) {
                    let h = enc.forward(&self.store, tape, x)?;
                    encoded.push(tape.relu(h));
                }
                if encoded.len() == 1 {
                    Ok(encoded[0])
                } else {
                    tape.concat(&encoded, 1)
                }
            }
        }
    }

    /// Sample indices grouped by selected branch.
    fn group_by_branch(&self, decisions: &[GateDecision]) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.branches()];
        for (s, d) in decisions.iter().enumerate() {
            groups[d.selected[0]].push(s);
        }
        groups
    }

    /// Run each non-empty sub-batch through its expert and scatter the rows
    /// back into batch order. With `rows` present (straight-through
    /// training) each output row is scaled by its sample's gate value for
    /// the executed branch, which carries gradients into the gate.
    fn routed_forward(
        &self,
        tape: &mut Tape,
        leaves: &[Value],
        groups: &[Vec<usize>],
        rows: Option<&[Value]>,
    ) -> Result<Value> {
        let mut parts = Vec::new();
        let mut maps = Vec::new();
        for (b, group) in groups.iter().enumerate() {
            if group.is_empty() {
                continue;
            }
            let expert = &self.experts[b];
            let inputs = expert
                .modality_subset
                .iter()
                .map(|&m| tape.gather_rows(leaves[m], group))
                .collect::<Result<Vec<_>>>()?;
            let mut out = expert.forward(&self.store, tape, &inputs)?;
            if let Some(rows) = rows {
                let picks: Vec<(Value, usize)> = group.iter().map(|&s| (rows[s], b)).collect();
                let col = tape.stack_selects(&picks)?;
                out = tape.mul_col(out, col)?;
            }
            parts.push(out);
            maps.push(group.clone());
        }
        tape.assemble_rows(&parts, &maps)
    }

    /// Analytic table cost of a whole batch under the given mode.
    fn batch_cost(&self, decisions: &[GateDecision], mode: GateMode) -> u64 {
        let n = decisions.len() as u64;
        match mode {
            GateMode::Soft => {
                n * (self.costs.gate_cost + self.costs.expert_costs.iter().sum::<u64>())
            }
            _ => {
                n * self.costs.gate_cost
                    + decisions
                        .iter()
                        .map(|d| self.costs.expert_costs[d.selected[0]])
                        .sum::<u64>()
            }
        }
    }

    /// Differentiable forward. `Soft` runs every expert and mixes outputs by
    /// the relaxed gate; `HardStraightThrough` runs only the selected expert
    /// per sample. Both leave per-sample gate rows in the decisions for the
    /// resource loss.
    pub fn forward_train(
        &self,
        x: &[Tensor],
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
        let (leaves, _) = self.leaf_inputs(&mut tape, x)?;
        let feats = self.gate_features(&mut tape, &leaves)?;
        let decisions = self.gate.forward(&self.store, &mut tape, feats, mode, tau, rng)?;
        let rows: Vec<Value> = decisions.iter().map(|d| d.row_values[0]).collect();
        let output = match mode {
            GateMode::HardStraightThrough => {
                let groups = self.group_by_branch(&decisions);
                self.routed_forward(&mut tape, &leaves, &groups, Some(&rows))?
            }
            _ => {
                // Soft: every expert sees the full batch; per-sample mixing
                // weights come from the relaxed rows.
                let mut acc: Option<Value> = None;
                for (b, expert) in self.experts.iter().enumerate() {
                    let inputs: Vec<Value> =
                        expert.modality_subset.iter().map(|&m| leaves[m]).collect();
                    let out = expert.forward(&self.store, &mut tape, &inputs)?;
                    let picks: Vec<(Value, usize)> = rows.iter().map(|&r| (r, b)).collect();
                    let col = tape.stack_selects(&picks)?;
                    let scaled = tape.mul_col(out, col)?;
                    acc = Some(match acc {
                        Some(a) => tape.add(a, scaled)?,
                        None => scaled,
                    });
                }
                acc.expect("model has at least two experts")
            }
        };
        let cost = self.batch_cost(&decisions, mode);
        Ok(TrainForward {
            tape,
            output,
            decisions,
            cost,
        })
    }

    /// Forward with caller-fixed decisions (static baselines, forced-path
    /// probes, random pretraining paths). The gate never runs and is not
    /// billed, so the tape counter equals the summed expert costs.
    pub fn forward_forced(&self, x: &[Tensor], selected: &[usize]) -> Result<TrainForward> {
        let mut tape = Tape::new();
        let (leaves, n) = self.leaf_inputs(&mut tape, x)?;
        if selected.len() != n {
            return Err(Error::Dimension {
                what: "forced decisions",
                expected: format!("{n}"),
                got: format!("{}", selected.len()),
            });
        }
        if let Some(&bad) = selected.iter().find(|&&b| b >= self.branches()) {
            return Err(Error::Dimension {
                what: "forced branch",
                expected: format!("< {}", self.branches()),
                got: format!("{bad}"),
            });
        }
        let decisions: Vec<GateDecision> = selected
            .iter()
            .map(|&b| GateDecision::forced(vec![b], self.branches()))
            .collect();
        let groups = self.group_by_branch(&decisions);
        let output = self.routed_forward(&mut tape, &leaves, &groups, None)?;
        let cost = selected
            .iter()
            .map(|&b| self.costs.expert_costs[b])
            .sum::<u64>();
        Ok(TrainForward {
            tape,
            output,
            decisions,
            cost,
        })
    }

    /// Forward every expert on the full batch with no gate involvement; the
    /// branch-pretraining stage trains on the summed per-expert losses.
    pub fn forward_all_experts(&self, x: &[Tensor]) -> Result<(Tape, Vec<Value>)> {
        let mut tape = Tape::new();
        let (leaves, _) = self.leaf_inputs(&mut tape, x)?;
        let outs = self
            .experts
            .iter()
            .map(|e| {
                let inputs: Vec<Value> = e.modality_subset.iter().map(|&m| leaves[m]).collect();
                e.forward(&self.store, &mut tape, &inputs)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((tape, outs))
    }

    /// Deployed forward: no noise, no gradients, and a tape counter that is
    /// asserted against the cost table.
    pub fn forward_inference(&self, x: &[Tensor], policy: InferencePolicy) -> Result<InferenceResult> {
        match policy {
            InferencePolicy::Hard => self.infer_hard(x),
            InferencePolicy::Soft { tau } => self.infer_soft(x, tau),
        }
    }

    fn infer_hard(&self, x: &[Tensor]) -> Result<InferenceResult> {
        let mut tape = Tape::new();
        let (leaves, _) = self.leaf_inputs(&mut tape, x)?;
        let feats = self.gate_features(&mut tape, &leaves)?;
        // Inference never draws noise; the RNG argument is a formality.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let decisions =
            self.gate
                .forward(&self.store, &mut tape, feats, GateMode::HardInference, 1.0, &mut rng)?;
        let groups = self.group_by_branch(&decisions);
        let output = self.routed_forward(&mut tape, &leaves, &groups, None)?;
        let outputs = tape.rows(output)?;
        let cost = self.batch_cost(&decisions, GateMode::HardInference);
        Ok(InferenceResult {
            outputs,
            decisions,
            cost,
            counted: tape.madds(),
        })
    }

    fn infer_soft(&self, x: &[Tensor], tau: f64) -> Result<InferenceResult> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(Error::InvalidTemperature(tau));
        }
        let mut tape = Tape::new();
        let (leaves, n) = self.leaf_inputs(&mut tape, x)?;
        let feats = self.gate_features(&mut tape, &leaves)?;
        let logits = self.gate.body.forward(&self.store, &mut tape, feats)?;
        let expert_outs = self
            .experts
            .iter()
            .map(|e| {
                let inputs: Vec<Value> = e.modality_subset.iter().map(|&m| leaves[m]).collect();
                let out = e.forward(&self.store, &mut tape, &inputs)?;
                tape.rows(out)
            })
            .collect::<Result<Vec<_>>>()?;
        // Mixing already-paid-for branch outputs is bookkeeping, not billed
        // network compute, so it runs off the tape: the counter stays equal
        // to gate + sum of branch costs.
        let logit_rows = tape.rows(logits)?;
        let b = self.branches();
        let mut outputs = Vec::with_capacity(n);
        let mut decisions = Vec::with_capacity(n);
        for s in 0..n {
            let scaled: Vec<f64> = logit_rows[s].iter().map(|l| l / tau).collect();
            let mut probs = vec![0.0; b];
            softmax_lane(&scaled, &mut probs);
            let mut y = vec![0.0; self.config.classes];
            for (i, rows) in expert_outs.iter().enumerate() {
                for (j, v) in rows[s].iter().enumerate() {
                    y[j] += probs[i] * v;
                }
            }
            let sel = argmax(&probs);
            let mut hard = vec![0.0; b];
            hard[sel] = 1.0;
            decisions.push(GateDecision {
                mode: GateMode::Soft,
                soft: vec![probs],
                hard: vec![hard],
                selected: vec![sel],
                row_values: Vec::new(),
            });
            outputs.push(y);
        }
        let cost = self.batch_cost(&decisions, GateMode::Soft);
        Ok(InferenceResult {
            outputs,
            decisions,
            cost,
            counted: tape.madds(),
        })
    }
}

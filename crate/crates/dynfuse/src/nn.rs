//! Network building blocks: a flat parameter store, linear layers, MLPs,
//! and the squeeze-and-excitation fusion block.
//!
//! Models own their parameters through a [`ParamStore`]; layers hold plain
//! indices into it. The store is what checkpoints serialize (flat `f64`
//! block in declaration order) and what the optimizer walks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Value};

/// Index of one parameter tensor inside a [`ParamStore`].
pub type ParamId = usize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitKind {
    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)).
    UniformFanIn { fan_in: usize },
    /// Every element set to the given constant.
    Constant(f64),
}

#[derive(Debug, Clone)]
pub struct ParamMeta {
    pub name: String,
    pub init: InitKind,
}

/// Flat, ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    tensors: Vec<Tensor>,
    metas: Vec<ParamMeta>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, shape: Vec<usize>, init: InitKind) -> ParamId {
        let t = Tensor::zeros(shape).with_grad();
        self.tensors.push(t);
        self.metas.push(ParamMeta {
            name: name.into(),
            init,
        });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.metas[id].name
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Draw every parameter from its declared initializer, in declaration
    /// order, from a stream seeded by `seed`. Identical seeds give identical
    /// parameters.
    pub fn init(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (t, meta) in self.tensors.iter_mut().zip(&self.metas) {
            match meta.init {
                InitKind::UniformFanIn { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    for x in t.data.iter_mut() {
                        *x = rng.gen_range(-bound..bound);
                    }
                }
                InitKind::Constant(c) => t.data.iter_mut().for_each(|x| *x = c),
            }
            t.grad = None;
        }
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.iter_mut() {
            t.zero_grad();
        }
    }

    /// All parameter values concatenated in declaration order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for t in &self.tensors {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Overwrite all parameters from a flat slice in declaration order.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Dimension {
                what: "ParamStore::load_flat",
                expected: format!("{} values", self.param_count()),
                got: format!("{}", flat.len()),
            });
        }
        let mut off = 0;
        for t in self.tensors.iter_mut() {
            let len = t.data.len();
            t.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        Ok(())
    }

    /// Order-insensitive fingerprint of a subset of parameters (used by the
    /// training-stage guards to detect accidental updates).
    pub fn digest(&self, ids: &[ParamId]) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for &id in ids {
            for x in &self.tensors[id].data {
                x.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Fully-connected layer `y = x·W + b` with `W: [in_dim × out_dim]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl LinearLayer {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.register(
            format!("{name}.w"),
            vec![in_dim, out_dim],
            InitKind::UniformFanIn { fan_in: in_dim },
        );
        let bias = store.register(format!("{name}.b"), vec![out_dim], InitKind::Constant(0.0));
        LinearLayer {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Forward a `[batch × in_dim]` input.
    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Value) -> Result<Value> {
        let w = tape.param(store.tensor(self.weight), self.weight);
        let b = tape.param(store.tensor(self.bias), self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row_broadcast(y, b)
    }

    /// Multiply-accumulates per sample (bias excluded by convention).
    pub fn madds(&self) -> u64 {
        (self.in_dim * self.out_dim) as u64
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    /// No nonlinearity (used for output layers).
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, v: Value) -> Value {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Sigmoid => tape.sigmoid(v),
            Activation::Tanh => tape.tanh(v),
            Activation::Identity => v,
        }
    }
}

/// Multi-layer perceptron: linears with a hidden activation between them
/// and no activation after the last layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<LinearLayer>,
    pub activation: Activation,
}

impl Mlp {
    /// Build from a dims chain `[in, h1, ..., out]` (at least two entries).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!(
                "mlp '{name}' needs at least [in, out] dims, got {dims:?}"
            )));
        }
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| LinearLayer::new(store, &format!("{name}.{i}"), w[0], w[1]))
            .collect();
        Ok(Mlp { layers, activation })
    }

    pub fn forward(&self, store: &ParamStore, tape: &mut Tape, x: Value) -> Result<Value> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(store, tape, h)?;
            if i != last {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }

    /// Closed-form multiply-accumulates per sample.
    pub fn madds(&self) -> u64 {
        self.layers.iter().map(LinearLayer::madds).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim * l.out_dim + l.out_dim)
            .sum()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(LinearLayer::param_ids).collect()
    }
}

/// Squeeze-and-excitation fusion of two equal-width streams:
/// each stream is gated by a sigmoid of its own bottleneck MLP, then the
/// gated streams are added.
///
/// `out = x1 ⊙ σ(mlp1(x1)) + x2 ⊙ σ(mlp2(x2))`, bottlenecks `d → d/r → d`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeFusionBlock {
    pub dim: usize,
    pub reduction: usize,
    pub mlp1: Mlp,
    pub mlp2: Mlp,
}

impl SeFusionBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || dim % reduction != 0 {
            return Err(Error::Config(format!(
                "se fusion '{name}': width {dim} not divisible by reduction {reduction}"
            )));
        }
        let squeeze = dim / reduction;
        let mlp1 = Mlp::new(store, &format!("{name}.se1"), &[dim, squeeze, dim], Activation::Relu)?;
        let mlp2 = Mlp::new(store, &format!("{name}.se2"), &[dim, squeeze, dim], Activation::Relu)?;
        Ok(SeFusionBlock {
            dim,
            reduction,
            mlp1,
            mlp2,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x1: Value,
        x2: Value,
    ) -> Result<Value> {
        let a1 = self.mlp1.forward(store, tape, x1)?;
        let g1 = tape.sigmoid(a1);
        let w1 = tape.mul(x1, g1)?;
        let a2 = self.mlp2.forward(store, tape, x2)?;
        let g2 = tape.sigmoid(a2);
        let w2 = tape.mul(x2, g2)?;
        tape.add(w1, w2)
    }

    /// Per-sample cost: both bottleneck MLPs, two gating multiplies, one add.
    pub fn madds(&self) -> u64 {
        self.mlp1.madds() + self.mlp2.madds() + 3 * self.dim as u64
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.mlp1.param_ids();
        ids.extend(self.mlp2.param_ids());
        ids
    }
}

/// Learned weighted sum of two equal-width streams:
/// `out = w[0]·x1 + w[1]·x2` with a two-element learned weight vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WeightedAdd {
    pub dim: usize,
    pub weights: ParamId,
}

impl WeightedAdd {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let weights = store.register(format!("{name}.w"), vec![2], InitKind::Constant(1.0));
        WeightedAdd { dim, weights }
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        tape: &mut Tape,
        x1: Value,
        x2: Value,
    ) -> Result<Value> {
        let w = tape.param(store.tensor(self.weights), self.weights);
        let w0 = tape.select(w, 0)?;
        let w1 = tape.select(w, 1)?;
        let s1 = tape.mul_scalarv(x1, w0)?;
        let s2 = tape.mul_scalarv(x2, w1)?;
        tape.add(s1, s2)
    }

    /// Two scaling multiplies plus one add per element.
    pub fn madds(&self) -> u64 {
        3 * self.dim as u64
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weights]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_reproducible_and_respects_bounds() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[8, 4, 2], Activation::Relu).unwrap();
        store.init(7);
        let first = store.flat();
        store.init(7);
        assert_eq!(store.flat(), first);
        store.init(8);
        assert_ne!(store.flat(), first);

        // Weight entries live inside the fan-in bound; biases are zero.
        let bound = 1.0 / (8f64).sqrt();
        let w = store.tensor(mlp.layers[0].weight);
        assert!(w.data.iter().all(|x| x.abs() < bound));
        let b = store.tensor(mlp.layers[0].bias);
        assert!(b.data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_mean_is_near_zero() {
        let mut store = ParamStore::new();
        let _ = Mlp::new(&mut store, "m", &[100, 100], Activation::Relu).unwrap();
        store.init(3);
        let flat = store.flat();
        let n = flat.len() as f64;
        let mean = flat.iter().sum::<f64>() / n;
        // Mean of n draws from Uniform(-b, b) has std b/sqrt(3n).
        let bound = 1.0 / 10.0;
        assert!(mean.abs() < 3.0 * bound / (3.0 * n).sqrt());
    }

    #[test]
    fn mlp_param_count_and_madds_are_closed_form() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[32, 16, 2], Activation::Relu).unwrap();
        assert_eq!(mlp.param_count(), 32 * 16 + 16 + 16 * 2 + 2);
        assert_eq!(mlp.madds(), (32 * 16 + 16 * 2) as u64);
        assert_eq!(store.param_count(), mlp.param_count());
    }

    #[test]
    fn mlp_forward_shape_mismatch_is_an_error() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[8, 2], Activation::Relu).unwrap();
        store.init(0);
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 5], vec![0.0; 5]).unwrap();
        assert!(mlp.forward(&store, &mut tape, x).is_err());
    }

    #[test]
    fn se_fusion_rejects_indivisible_width() {
        let mut store = ParamStore::new();
        assert!(SeFusionBlock::new(&mut store, "se", 10, 4).is_err());
        assert!(SeFusionBlock::new(&mut store, "se", 8, 4).is_ok());
    }

    #[test]
    fn se_fusion_is_permutation_equivariant_across_batch() {
        let mut store = ParamStore::new();
        let se = SeFusionBlock::new(&mut store, "se", 8, 4).unwrap();
        store.init(11);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x1: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = (0..24).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let run = |rows: &[usize], store: &ParamStore| {
            let mut tape = Tape::new();
            let permute = |src: &[f64]| -> Vec<f64> {
                rows.iter()
                    .flat_map(|&r| src[r * 8..(r + 1) * 8].to_vec())
                    .collect()
            };
            let a = tape.constant(vec![3, 8], permute(&x1)).unwrap();
            let b = tape.constant(vec![3, 8], permute(&x2)).unwrap();
            let out = se.forward(store, &mut tape, a, b).unwrap();
            tape.data(out).to_vec()
        };

        let plain = run(&[0, 1, 2], &store);
        let swapped = run(&[2, 0, 1], &store);
        for (i, &r) in [2usize, 0, 1].iter().enumerate() {
            assert_eq!(swapped[i * 8..(i + 1) * 8], plain[r * 8..(r + 1) * 8]);
        }
    }

    #[test]
    fn weighted_add_with_unit_weights_is_plain_add() {
        let mut store = ParamStore::new();
        let wa = WeightedAdd::new(&mut store, "wa", 4);
        store.init(0); // constants stay at 1.0
        let mut tape = Tape::new();
        let a = tape.constant(vec![1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = tape.constant(vec![1, 4], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let out = wa.forward(&store, &mut tape, a, b).unwrap();
        assert_eq!(tape.data(out), &[11.0, 22.0, 33.0, 44.0]);
    }

    #[test]
    fn flat_roundtrip_preserves_everything() {
        let mut store = ParamStore::new();
        let _ = Mlp::new(&mut store, "m", &[5, 3], Activation::Tanh).unwrap();
        store.init(42);
        let flat = store.flat();
        let mut other = store.clone();
        other.init(43);
        assert_ne!(other.flat(), flat);
        other.load_flat(&flat).unwrap();
        assert_eq!(other.flat(), flat);
        assert!(other.load_flat(&flat[1..]).is_err());
    }
}

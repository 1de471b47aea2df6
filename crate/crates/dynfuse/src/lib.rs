//! Input-adaptive multimodal fusion networks.
//!
//! Small multimodal models whose per-sample forward path is chosen by a
//! learned gate, trained to trade task loss against an exact
//! multiply-accumulate budget. The crate covers the whole desk-scale
//! pipeline: a reverse-mode tape, network blocks, Gumbel-softmax gating,
//! branch- and cell-level routed architectures, cost accounting, a
//! two-stage trainer, a synthetic multimodal data generator, and an
//! experiment harness with sweep / robustness / ablation runners.

pub(crate) mod bytes;
pub mod checkpoint;
pub mod cost;
pub mod data;
pub mod error;
pub mod forward;
pub mod fusion;
pub mod gating;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod moe;
pub mod nn;
pub mod par;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

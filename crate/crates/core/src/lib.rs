//! Decoder-only transformer inference on CPU with frozen, sentence-level FFN
//! neuron sparsity.
//!
//! The pipeline: a dense pre-fill records every FFN activation, each token's
//! top positive activations form its core set, the most frequent members
//! across the prompt form the sentence's core set, and that set (or one
//! predicted from a semantic group store) is frozen for the whole decode.

pub mod core_neuron;
pub mod engine;
pub mod error;
pub mod evalbench;
pub mod model;
pub mod plan;
pub mod predictor;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use model::{ActivationRecord, KvCache, Model, ModelConfig};
pub use plan::{PlanStrategy, Provenance, SparsePlan};

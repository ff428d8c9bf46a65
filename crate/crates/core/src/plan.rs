use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::core_neuron::NeuronSet;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStrategy {
    Stability,
    Similarity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum Provenance {
    Prefill,
    Group { id: usize, label: String },
}

/// Frozen per-layer FFN neuron sets. Layers outside `[layer_start, layer_end)`
/// run dense.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsePlan {
    pub strategy: PlanStrategy,
    pub layer_start: usize,
    pub layer_end: usize,
    pub sets: Vec<NeuronSet>,
    pub provenance: Provenance,
}

impl SparsePlan {
    pub fn new(
        strategy: PlanStrategy,
        layer_start: usize,
        sets: Vec<NeuronSet>,
        provenance: Provenance,
    ) -> Self {
        let layer_end = layer_start + sets.len();
        Self {
            strategy,
            layer_start,
            layer_end,
            sets,
            provenance,
        }
    }

    /// Every layer in `[0, n_layers)` gets the full neuron set.
    pub fn full(n_layers: usize, n_neurons: usize) -> Self {
        Self::new(
            PlanStrategy::Stability,
            0,
            vec![NeuronSet::full(n_neurons); n_layers],
            Provenance::Prefill,
        )
    }

    /// Neuron set for `layer`, or `None` when the layer runs dense.
    pub fn set_for_layer(&self, layer: usize) -> Option<&NeuronSet> {
        if layer >= self.layer_start && layer < self.layer_end {
            self.sets.get(layer - self.layer_start)
        } else {
            None
        }
    }

    pub fn validate(&self, n_layers: usize, n_neurons: usize) -> Result<()> {
        if self.layer_end - self.layer_start != self.sets.len() || self.layer_start > self.layer_end {
            return Err(Error::InvalidPlan(format!(
                "layer range [{}, {}) does not match {} sets",
                self.layer_start,
                self.layer_end,
                self.sets.len()
            )));
        }
        if self.layer_end > n_layers {
            return Err(Error::InvalidPlan(format!(
                "layer range [{}, {}) exceeds model depth {n_layers}",
                self.layer_start, self.layer_end
            )));
        }
        for (i, s) in self.sets.iter().enumerate() {
            if let Some(max) = s.max_index() {
                if max as usize >= n_neurons {
                    return Err(Error::InvalidPlan(format!(
                        "layer {} references neuron {max} but the layer has {n_neurons}",
                        self.layer_start + i
                    )));
                }
            }
        }
        Ok(())
    }

    /// Layers whose set is empty; their FFN contributes only the residual and
    /// output bias.
    pub fn empty_layers(&self) -> Vec<usize> {
        self.sets
            .iter()
            .enumerate()
            .filter(|(_, s)| s.is_empty())
            .map(|(i, _)| self.layer_start + i)
            .collect()
    }

    /// Neuron count executed at each of `n_layers` layers.
    pub fn active_neurons(&self, n_layers: usize, n_neurons: usize) -> Vec<usize> {
        (0..n_layers)
            .map(|l| self.set_for_layer(l).map_or(n_neurons, NeuronSet::len))
            .collect()
    }

    /// Mean over all layers of `k_i / N`.
    pub fn mean_fraction(&self, n_layers: usize, n_neurons: usize) -> f64 {
        let total: usize = self.active_neurons(n_layers, n_neurons).iter().sum();
        total as f64 / (n_layers * n_neurons) as f64
    }

    /// SHA-256 over the execution-relevant content of the plan.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(match self.strategy {
            PlanStrategy::Stability => b"stability".as_slice(),
            PlanStrategy::Similarity => b"similarity".as_slice(),
        });
        h.update((self.layer_start as u64).to_le_bytes());
        h.update((self.layer_end as u64).to_le_bytes());
        for s in &self.sets {
            h.update((s.len() as u64).to_le_bytes());
            for n in s.iter() {
                h.update(n.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

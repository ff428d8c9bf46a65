//! Token-wise and sentence-wise core neuron extraction.
//!
//! A token's core neurons at one activation layer are the top `alpha`
//! fraction of its strictly positive activations. A sentence's core neurons
//! are the top `beta` fraction of neurons ranked by how many of its tokens
//! selected them. Ties are always broken toward the lower neuron index.

use std::cmp::Ordering;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{check_fraction, fraction_count};

/// Strictly increasing list of neuron indices.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NeuronSet(Vec<u32>);

impl NeuronSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    /// Builds a set from arbitrary indices, sorting and deduplicating.
    pub fn from_indices(mut indices: Vec<u32>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    /// Full set `{0, .., n-1}`.
    pub fn full(n: usize) -> Self {
        Self((0..n as u32).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, n: u32) -> bool {
        self.0.binary_search(&n).is_ok()
    }

    pub fn max_index(&self) -> Option<u32> {
        self.0.last().copied()
    }

    pub fn is_subset(&self, other: &NeuronSet) -> bool {
        self.intersection_len(other) == self.len()
    }

    pub fn intersection_len(&self, other: &NeuronSet) -> usize {
        let (mut i, mut j, mut n) = (0, 0, 0);
        let (a, b) = (&self.0, &other.0);
        while i < a.len() && j < b.len() {
            match a[i].cmp(&b[j]) {
                Ordering::Less => i += 1,
                Ordering::Greater => j += 1,
                Ordering::Equal => {
                    n += 1;
                    i += 1;
                    j += 1;
                }
            }
        }
        n
    }
}

impl FromIterator<u32> for NeuronSet {
    fn from_iter<I: IntoIterator<Item = u32>>(iter: I) -> Self {
        Self::from_indices(iter.into_iter().collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCoreSet {
    pub layer: usize,
    pub token_pos: usize,
    pub neurons: NeuronSet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrequencyMap {
    pub layer: usize,
    pub counts: Vec<u32>,
}

impl FrequencyMap {
    pub fn zeros(layer: usize, n_neurons: usize) -> Self {
        Self {
            layer,
            counts: vec![0; n_neurons],
        }
    }

    pub fn add_set(&mut self, set: &NeuronSet) {
        for n in set.iter() {
            self.counts[n as usize] += 1;
        }
    }

    /// Element-wise sum with another map of the same shape.
    pub fn merge(&mut self, other: &FrequencyMap) -> Result<()> {
        if other.counts.len() != self.counts.len() {
            return Err(Error::shape(
                "FrequencyMap::merge",
                self.counts.len(),
                other.counts.len(),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn nonzero(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SentenceCoreSet {
    pub layer: usize,
    pub neurons: NeuronSet,
    pub alpha: f64,
    pub beta: f64,
}

/// Indices of the `k` largest eligible scores, ties to the lower index,
/// returned in ascending index order.
fn select_top<T, F>(scores: &[T], eligible: F, k: usize) -> NeuronSet
where
    T: Copy,
    F: Fn(T) -> bool,
    T: PartialOrd,
{
    let mut pool: Vec<u32> = (0..scores.len() as u32)
        .filter(|&i| eligible(scores[i as usize]))
        .collect();
    let k = k.min(pool.len());
    if k == 0 {
        return NeuronSet::empty();
    }
    let rank = |a: &u32, b: &u32| {
        let (sa, sb) = (scores[*a as usize], scores[*b as usize]);
        sb.partial_cmp(&sa).unwrap_or(Ordering::Equal).then(a.cmp(b))
    };
    if k < pool.len() {
        pool.select_nth_unstable_by(k - 1, rank);
        pool.truncate(k);
    }
    pool.sort_unstable();
    NeuronSet(pool)
}

/// Token-wise core neurons: the `ceil(alpha·|A⁺|)` largest strictly positive
/// activations.
pub fn token_core(activations: &[f32], alpha: f64) -> Result<NeuronSet> {
    check_fraction(alpha, "alpha")?;
    let positive = activations.iter().filter(|&&a| a > 0.0).count();
    let k = fraction_count(alpha, positive);
    Ok(select_top(activations, |a: f32| a > 0.0, k))
}

/// [`token_core`] wrapped with its layer and position.
pub fn token_core_set(
    layer: usize,
    token_pos: usize,
    activations: &[f32],
    alpha: f64,
) -> Result<TokenCoreSet> {
    Ok(TokenCoreSet {
        layer,
        token_pos,
        neurons: token_core(activations, alpha)?,
    })
}

/// Per-neuron membership counts over one layer's token core sets.
pub fn frequency_counts(
    layer: usize,
    n_neurons: usize,
    sets: &[TokenCoreSet],
) -> Result<FrequencyMap> {
    let mut freq = FrequencyMap::zeros(layer, n_neurons);
    for s in sets {
        if s.layer != layer {
            return Err(Error::LayerMismatch(format!(
                "token core set at position {} is from layer {}, expected {layer}",
                s.token_pos, s.layer
            )));
        }
        if let Some(max) = s.neurons.max_index() {
            if max as usize >= n_neurons {
                return Err(Error::IndexOutOfRange {
                    what: "neurons",
                    index: max as usize,
                    bound: n_neurons,
                });
            }
        }
        freq.add_set(&s.neurons);
    }
    Ok(freq)
}

/// Top `beta` fraction of the neurons with nonzero count.
pub fn select_frequent(freq: &FrequencyMap, frac: f64) -> Result<NeuronSet> {
    check_fraction(frac, "fraction")?;
    let k = fraction_count(frac, freq.nonzero());
    Ok(select_top(&freq.counts, |c: u32| c > 0, k))
}

/// Sentence-wise core neurons from a frequency map.
pub fn sentence_core(freq: &FrequencyMap, alpha: f64, beta: f64) -> Result<SentenceCoreSet> {
    let neurons = select_frequent(freq, beta)?;
    if neurons.is_empty() {
        log::warn!("layer {}: all-zero frequency map, sentence core set is empty", freq.layer);
    }
    Ok(SentenceCoreSet {
        layer: freq.layer,
        neurons,
        alpha,
        beta,
    })
}

/// `|a ∩ b| / |a ∪ b|`; two empty sets are fully similar.
pub fn core_similarity(a: &NeuronSet, b: &NeuronSet) -> f64 {
    let inter = a.intersection_len(b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stability {
    Stable,
    Unstable,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityEstimate {
    pub verdict: Stability,
    pub similarity: f64,
}

/// Compares the core set of a prompt prefix against the full prompt's.
pub fn stability_estimate(
    prefix: &SentenceCoreSet,
    full: &SentenceCoreSet,
    tau: f64,
) -> Result<StabilityEstimate> {
    if prefix.layer != full.layer {
        return Err(Error::LayerMismatch(format!(
            "prefix set from layer {}, full set from layer {}",
            prefix.layer, full.layer
        )));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must be in (0, 1), got {tau}")));
    }
    let similarity = core_similarity(&prefix.neurons, &full.neurons);
    let verdict = if similarity >= tau {
        Stability::Stable
    } else {
        Stability::Unstable
    };
    Ok(StabilityEstimate {
        verdict,
        similarity,
    })
}

/// Writes `layer,neuron,count` rows for every nonzero count.
pub fn write_frequency_csv<W: Write>(out: W, maps: &[FrequencyMap]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "neuron", "count"])?;
    for m in maps {
        for (n, &c) in m.counts.iter().enumerate() {
            if c > 0 {
                w.write_record([m.layer.to_string(), n.to_string(), c.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("frequency csv", e))?;
    Ok(())
}

/// Writes `layer,neuron` rows for each core set.
pub fn write_core_sets_csv<W: Write>(out: W, sets: &[SentenceCoreSet]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["layer", "neuron"])?;
    for s in sets {
        for n in s.neurons.iter() {
            w.write_record([s.layer.to_string(), n.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("core set csv", e))?;
    Ok(())
}

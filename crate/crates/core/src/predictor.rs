//! Sparse-plan prediction.
//!
//! Stability-guided plans reuse the prompt's own sentence core sets.
//! Similarity-guided plans come from a [`SemanticGroupStore`]: corpus
//! sentences are grouped (by label, or by K-means on their mean activation at
//! a reference layer) and each group keeps per-layer neuron frequency tallies.
//! A new input is assigned to the nearest group centroid and executes that
//! group's most frequent neurons.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core_neuron::{select_frequent, token_core, FrequencyMap, SentenceCoreSet};
use crate::error::{Error, Result};
use crate::model::ActivationRecord;
use crate::plan::{PlanStrategy, Provenance, SparsePlan};
use crate::tensor::check_fraction;

/// First layer (0-based) covered by similarity-guided plans; the three layers
/// below it always run dense.
pub const SIMILARITY_LAYER_START: usize = 3;

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_REL_TOL: f64 = 1e-6;

/// Default clustering layer: `floor(0.78·L)`.
pub fn default_reference_layer(n_layers: usize) -> usize {
    ((0.78 * n_layers as f64).floor() as usize).min(n_layers.saturating_sub(1))
}

pub fn predict_stability(prefill_sets: &[SentenceCoreSet], n_layers: usize) -> Result<SparsePlan> {
    if prefill_sets.len() != n_layers {
        return Err(Error::InvalidPlan(format!(
            "expected {n_layers} pre-fill core sets, got {}",
            prefill_sets.len()
        )));
    }
    for (l, s) in prefill_sets.iter().enumerate() {
        if s.layer != l {
            return Err(Error::LayerMismatch(format!(
                "core set {l} is from layer {}; layer {l} is missing",
                s.layer
            )));
        }
    }
    Ok(SparsePlan::new(
        PlanStrategy::Stability,
        0,
        prefill_sets.iter().map(|s| s.neurons.clone()).collect(),
        Provenance::Prefill,
    ))
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Index of the nearest centroid; ties go to the lower index.
fn nearest(point: &[f32], centroids: &[Vec<f32>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub centroids: Vec<Vec<f32>>,
    pub assignments: Vec<usize>,
    pub wcss: f64,
    pub iterations: usize,
}

/// Lloyd's K-means with farthest-point seeding. The first seed is drawn from
/// `seed`; each further seed is the point farthest from those chosen so far.
pub fn kmeans(points: &[Vec<f32>], k: usize, seed: u64) -> Result<KMeans> {
    if k == 0 || k > points.len() {
        return Err(Error::Clustering(format!(
            "cannot form {k} clusters from {} points",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Clustering("points have mixed dimensions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut min_d: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let mut far = 0;
        for (i, &d) in min_d.iter().enumerate() {
            if d > min_d[far] {
                far = i;
            }
        }
        centroids.push(points[far].clone());
        for (d, p) in min_d.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &points[far]));
        }
    }

    let mut assignments = vec![usize::MAX; points.len()];
    let mut wcss = f64::INFINITY;
    let mut iterations = 0;
    while iterations < KMEANS_MAX_ITERS {
        iterations += 1;
        let mut changed = false;
        for (a, p) in assignments.iter_mut().zip(points) {
            let (c, _) = nearest(p, &centroids);
            changed |= *a != c;
            *a = c;
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (&a, p) in assignments.iter().zip(points) {
            counts[a] += 1;
            for (s, &x) in sums[a].iter_mut().zip(p) {
                *s += x as f64;
            }
        }
        for ((c, s), &n) in centroids.iter_mut().zip(&sums).zip(&counts) {
            if n > 0 {
                *c = s.iter().map(|&x| (x / n as f64) as f32).collect();
            }
        }
        let prev = wcss;
        wcss = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        let rel = if prev.is_finite() {
            (prev - wcss).abs() / prev.max(f64::MIN_POSITIVE)
        } else {
            f64::INFINITY
        };
        if !changed || rel < KMEANS_REL_TOL {
            break;
        }
    }
    Ok(KMeans {
        centroids,
        assignments,
        wcss,
        iterations,
    })
}

/// Picks the elbow of a WCSS curve: the candidate farthest from the chord
/// joining the first and last points. Ties go to the smaller `k`.
pub fn elbow_select_k(wcss: &[(usize, f64)]) -> Result<usize> {
    if wcss.len() < 3 {
        return Err(Error::Clustering(format!(
            "elbow selection needs at least 3 candidates, got {}",
            wcss.len()
        )));
    }
    if wcss.windows(2).any(|w| w[1].1 > w[0].1) {
        log::warn!("WCSS curve is not non-increasing in k");
    }
    let (x1, y1) = (wcss[0].0 as f64, wcss[0].1);
    let (x2, y2) = (wcss[wcss.len() - 1].0 as f64, wcss[wcss.len() - 1].1);
    let (dx, dy) = (x2 - x1, y2 - y1);
    // Perpendicular distance up to the common 1/|chord| factor.
    let dist = |k: f64, w: f64| (dy * k - dx * w + x2 * y1 - y2 * x1).abs();
    let scale = wcss.iter().map(|p| p.1.abs()).fold(0.0, f64::max).max(1.0) * dx.abs().max(1.0);
    let mut best = (wcss[1].0, dist(wcss[1].0 as f64, wcss[1].1));
    for &(k, w) in &wcss[2..wcss.len() - 1] {
        let d = dist(k as f64, w);
        if d > best.1 + 1e-12 * scale {
            best = (k, d);
        }
    }
    Ok(best.0)
}

/// Per-sentence digest of a pre-fill activation stream.
#[derive(Clone, Debug, PartialEq)]
pub struct SentenceProfile {
    /// Token-core frequency map for every layer.
    pub freq: Vec<FrequencyMap>,
    /// Mean activation over tokens at the reference layer.
    pub reference_mean: Vec<f32>,
}

impl SentenceProfile {
    pub fn from_records(
        records: &[ActivationRecord],
        n_layers: usize,
        n_neurons: usize,
        reference_layer: usize,
        alpha: f64,
    ) -> Result<Self> {
        let mut freq: Vec<FrequencyMap> = (0..n_layers).map(|l| FrequencyMap::zeros(l, n_neurons)).collect();
        let mut sum = vec![0.0f64; n_neurons];
        let mut tokens = 0usize;
        for r in records {
            if r.layer >= n_layers || r.values.len() != n_neurons {
                return Err(Error::shape(
                    "SentenceProfile::from_records",
                    format!("layer < {n_layers} with {n_neurons} values"),
                    format!("layer {} with {} values", r.layer, r.values.len()),
                ));
            }
            freq[r.layer].add_set(&token_core(&r.values, alpha)?);
            if r.layer == reference_layer {
                tokens += 1;
                for (s, &v) in sum.iter_mut().zip(&r.values) {
                    *s += v as f64;
                }
            }
        }
        let denom = tokens.max(1) as f64;
        Ok(Self {
            freq,
            reference_mean: sum.iter().map(|&s| (s / denom) as f32).collect(),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GroupStoreOptions {
    pub alpha: f64,
    pub gamma: f64,
    /// Defaults to `floor(0.78·L)`.
    pub reference_layer: Option<usize>,
    pub layer_start: usize,
    /// Fixed cluster count; bypasses the elbow search.
    pub k: Option<usize>,
    pub k_max: usize,
    pub seed: u64,
}

impl Default for GroupStoreOptions {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            gamma: 0.2,
            reference_layer: None,
            layer_start: SIMILARITY_LAYER_START,
            k: None,
            k_max: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticGroupStore {
    pub reference_layer: usize,
    pub n_layers: usize,
    pub n_neurons: usize,
    pub alpha: f64,
    pub gamma: f64,
    pub layer_start: usize,
    pub labels: Vec<String>,
    /// `k_groups × N`.
    pub centroids: Vec<Vec<f32>>,
    /// `k_groups × (L − layer_start)` maps.
    pub per_group_freq: Vec<Vec<FrequencyMap>>,
    /// Member sentences per group.
    pub members: Vec<usize>,
    /// `(k, WCSS)` curve when K-means chose the group count.
    pub wcss_curve: Vec<(usize, f64)>,
}

impl SemanticGroupStore {
    pub fn k_groups(&self) -> usize {
        self.centroids.len()
    }

    pub fn layer_range(&self) -> (usize, usize) {
        (self.layer_start, self.n_layers)
    }
}

pub fn build_group_store(
    profiles: &[SentenceProfile],
    labels: Option<&[String]>,
    opts: &GroupStoreOptions,
) -> Result<SemanticGroupStore> {
    check_fraction(opts.alpha, "alpha")?;
    check_fraction(opts.gamma, "gamma")?;
    if profiles.len() < 2 {
        return Err(Error::Clustering(format!(
            "need at least 2 sentences, got {}",
            profiles.len()
        )));
    }
    let n_layers = profiles[0].freq.len();
    let n_neurons = profiles[0].reference_mean.len();
    if profiles.iter().any(|p| p.freq.len() != n_layers || p.reference_mean.len() != n_neurons) {
        return Err(Error::Clustering("sentence profiles have mixed shapes".into()));
    }
    if opts.layer_start >= n_layers {
        return Err(Error::InvalidArgument(format!(
            "layer_start {} must be below n_layers {n_layers}",
            opts.layer_start
        )));
    }
    let reference_layer = opts.reference_layer.unwrap_or_else(|| default_reference_layer(n_layers));
    let points: Vec<Vec<f32>> = profiles.iter().map(|p| p.reference_mean.clone()).collect();

    let mut wcss_curve = Vec::new();
    let (group_labels, assignments, fallback_centroids) = match labels {
        Some(labels) => {
            if labels.len() != profiles.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} labels for {} sentences",
                    labels.len(),
                    profiles.len()
                )));
            }
            let ids: BTreeMap<&str, usize> = labels
                .iter()
                .map(String::as_str)
                .collect::<std::collections::BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, l)| (l, i))
                .collect();
            let names: Vec<String> = ids.keys().map(|s| s.to_string()).collect();
            let assign = labels.iter().map(|l| ids[l.as_str()]).collect();
            (names, assign, None)
        }
        None => {
            let degenerate = points.iter().all(|p| p == &points[0]);
            let k = if degenerate {
                log::warn!("all sentence activations are identical; using a single group");
                1
            } else if let Some(k) = opts.k {
                if k > points.len() {
                    return Err(Error::Clustering(format!(
                        "k = {k} exceeds the {} sentences",
                        points.len()
                    )));
                }
                k
            } else {
                let k_hi = opts.k_max.min(points.len());
                for k in 1..=k_hi {
                    wcss_curve.push((k, kmeans(&points, k, opts.seed)?.wcss));
                }
                if wcss_curve.len() < 3 {
                    log::warn!("too few sentences for an elbow search; using a single group");
                    1
                } else {
                    elbow_select_k(&wcss_curve)?
                }
            };
            let km = kmeans(&points, k, opts.seed)?;
            let names = (0..k).map(|i| format!("cluster-{i}")).collect();
            (names, km.assignments, Some(km.centroids))
        }
    };

    let k = group_labels.len();
    let range_len = n_layers - opts.layer_start;
    let mut per_group_freq: Vec<Vec<FrequencyMap>> = (0..k)
        .map(|_| (opts.layer_start..n_layers).map(|l| FrequencyMap::zeros(l, n_neurons)).collect())
        .collect();
    let mut sums = vec![vec![0.0f64; n_neurons]; k];
    let mut members = vec![0usize; k];
    for (p, &g) in profiles.iter().zip(&assignments) {
        members[g] += 1;
        for j in 0..range_len {
            per_group_freq[g][j].merge(&p.freq[opts.layer_start + j])?;
        }
        for (s, &v) in sums[g].iter_mut().zip(&p.reference_mean) {
            *s += v as f64;
        }
    }
    let centroids = (0..k)
        .map(|g| {
            if members[g] > 0 {
                sums[g].iter().map(|&s| (s / members[g] as f64) as f32).collect()
            } else {
                fallback_centroids.as_ref().map_or_else(|| vec![0.0; n_neurons], |c| c[g].clone())
            }
        })
        .collect();

    Ok(SemanticGroupStore {
        reference_layer,
        n_layers,
        n_neurons,
        alpha: opts.alpha,
        gamma: opts.gamma,
        layer_start: opts.layer_start,
        labels: group_labels,
        centroids,
        per_group_freq,
        members,
        wcss_curve,
    })
}

/// Nearest centroid by Euclidean distance; ties go to the lowest group id.
pub fn assign_group(store: &SemanticGroupStore, reference_activation: &[f32]) -> Result<usize> {
    if reference_activation.len() != store.n_neurons {
        return Err(Error::shape("assign_group", store.n_neurons, reference_activation.len()));
    }
    Ok(nearest(reference_activation, &store.centroids).0)
}

/// Plan from a group's most frequent neurons, using the store's `gamma`.
pub fn predict_similarity(store: &SemanticGroupStore, group: usize) -> Result<SparsePlan> {
    predict_similarity_with(store, group, store.gamma)
}

pub fn predict_similarity_with(store: &SemanticGroupStore, group: usize, gamma: f64) -> Result<SparsePlan> {
    check_fraction(gamma, "gamma")?;
    let maps = store.per_group_freq.get(group).ok_or(Error::EmptyGroup(group))?;
    if maps.iter().all(|m| m.nonzero() == 0) {
        return Err(Error::EmptyGroup(group));
    }
    let sets = maps
        .iter()
        .map(|m| select_frequent(m, gamma))
        .collect::<Result<Vec<_>>>()?;
    Ok(SparsePlan::new(
        PlanStrategy::Similarity,
        store.layer_start,
        sets,
        Provenance::Group {
            id: group,
            label: store.labels[group].clone(),
        },
    ))
}

const STORE_MAGIC: &[u8; 8] = b"CINFGRPS";
const STORE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    reference_layer: usize,
    k_groups: usize,
    gamma: f64,
    alpha: f64,
    layer_range: [usize; 2],
    #[serde(rename = "N")]
    n_neurons: usize,
    #[serde(rename = "L")]
    n_layers: usize,
    labels: Vec<String>,
    members: Vec<usize>,
    wcss_curve: Vec<(usize, f64)>,
}

/// Serializes a store:
/// `"CINFGRPS" | u32 version | u64 header_len | JSON header | centroids (f32 LE)
/// | counts (u32 LE, group-major then layer then neuron) | u32 CRC32`.
pub fn encode_store(store: &SemanticGroupStore) -> Result<Vec<u8>> {
    let header = StoreHeader {
        reference_layer: store.reference_layer,
        k_groups: store.k_groups(),
        gamma: store.gamma,
        alpha: store.alpha,
        layer_range: [store.layer_start, store.n_layers],
        n_neurons: store.n_neurons,
        n_layers: store.n_layers,
        labels: store.labels.clone(),
        members: store.members.clone(),
        wcss_curve: store.wcss_curve.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::json("store header", e))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(STORE_MAGIC);
    buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for c in &store.centroids {
        for &x in c {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    for group in &store.per_group_freq {
        for m in group {
            for &c in &m.counts {
                buf.extend_from_slice(&c.to_le_bytes());
            }
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

pub fn decode_store(bytes: &[u8], path: &Path) -> Result<SemanticGroupStore> {
    let malformed = |reason: String| Error::Malformed {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 8 || &bytes[..8] != STORE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "CINFGRPS",
        });
    }
    if bytes.len() < 8 + 4 + 8 + 4 {
        return Err(malformed("file too short".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != STORE_VERSION {
        return Err(Error::UnsupportedVersion {
            path: path.to_path_buf(),
            found: version,
        });
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let rest = &body[20..];
    if rest.len() < hlen {
        return Err(malformed("header length exceeds file".into()));
    }
    let header: StoreHeader =
        serde_json::from_slice(&rest[..hlen]).map_err(|e| Error::json(path.display().to_string(), e))?;
    let [layer_start, layer_end] = header.layer_range;
    if layer_end != header.n_layers || layer_start >= layer_end {
        return Err(malformed(format!("bad layer_range {:?}", header.layer_range)));
    }
    let (k, n) = (header.k_groups, header.n_neurons);
    let range_len = layer_end - layer_start;
    let expect = k * n * 4 + k * range_len * n * 4;
    let data = &rest[hlen..];
    if data.len() != expect || header.labels.len() != k || header.members.len() != k {
        return Err(malformed(format!(
            "expected {expect} data bytes for {k} groups, found {}",
            data.len()
        )));
    }
    let (cent_bytes, count_bytes) = data.split_at(k * n * 4);
    let centroids = cent_bytes
        .chunks_exact(n * 4)
        .map(|c| c.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect())
        .collect();
    let counts: Vec<u32> = count_bytes
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let per_group_freq = counts
        .chunks_exact(range_len * n)
        .map(|g| {
            g.chunks_exact(n)
                .enumerate()
                .map(|(j, c)| FrequencyMap {
                    layer: layer_start + j,
                    counts: c.to_vec(),
                })
                .collect()
        })
        .collect();
    Ok(SemanticGroupStore {
        reference_layer: header.reference_layer,
        n_layers: header.n_layers,
        n_neurons: n,
        alpha: header.alpha,
        gamma: header.gamma,
        layer_start,
        labels: header.labels,
        centroids,
        per_group_freq,
        members: header.members,
        wcss_curve: header.wcss_curve,
    })
}

pub fn save_store(store: &SemanticGroupStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode_store(store)?).map_err(|e| Error::io(path, e))
}

pub fn load_store(path: &Path) -> Result<SemanticGroupStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_store(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::core_neuron::{sentence_core, NeuronSet};
    use crate::synth::gaussian_blobs;
    use proptest::prelude::*;

    /// Perpendicular distance with the full normalization, as an oracle.
    fn chord_oracle(pts: &[(usize, f64)]) -> usize {
        let (x1, y1) = (pts[0].0 as f64, pts[0].1);
        let (x2, y2) = (pts[pts.len() - 1].0 as f64, pts[pts.len() - 1].1);
        let norm = ((y2 - y1).powi(2) + (x2 - x1).powi(2)).sqrt();
        let mut best = (0usize, -1.0f64);
        for &(k, w) in pts {
            let d = ((y2 - y1) * k as f64 - (x2 - x1) * w + x2 * y1 - y2 * x1).abs() / norm;
            if d > best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    #[test]
    fn elbow_examples() {
        let pts = [(1, 100.0), (2, 50.0), (3, 30.0), (4, 25.0), (5, 23.0), (6, 22.0)];
        assert_eq!(chord_oracle(&pts), 3);
        assert_eq!(elbow_select_k(&pts).unwrap(), 3);
        let linear: Vec<_> = (1..=6).map(|k| (k, 60.0 - 10.0 * k as f64)).collect();
        assert_eq!(elbow_select_k(&linear).unwrap(), 2);
        assert!(elbow_select_k(&pts[..2]).is_err());
    }

    fn profile(counts_per_layer: &[Vec<u32>], mean: Vec<f32>) -> SentenceProfile {
        SentenceProfile {
            freq: counts_per_layer
                .iter()
                .enumerate()
                .map(|(l, c)| FrequencyMap { layer: l, counts: c.clone() })
                .collect(),
            reference_mean: mean,
        }
    }

    fn labelled_corpus() -> (Vec<SentenceProfile>, Vec<String>) {
        let mut profiles = Vec::new();
        let mut labels = Vec::new();
        for (i, topic) in ["world", "sports", "business", "sci"].iter().enumerate() {
            for j in 0..3u32 {
                let counts: Vec<Vec<u32>> = (0..5)
                    .map(|l| {
                        let mut c = vec![0u32; 8];
                        c[i * 2] = 2 + j;
                        c[i * 2 + 1] = 1 + l as u32;
                        c
                    })
                    .collect();
                let mut mean = vec![0.0; 8];
                mean[i * 2] = 1.0 + j as f32 * 0.1;
                profiles.push(profile(&counts, mean));
                labels.push(topic.to_string());
            }
        }
        (profiles, labels)
    }

    #[test]
    fn labelled_store_has_one_group_per_label() {
        let (profiles, labels) = labelled_corpus();
        let store = build_group_store(&profiles, Some(&labels), &GroupStoreOptions::default()).unwrap();
        assert_eq!(store.k_groups(), 4);
        assert_eq!(store.labels, vec!["business", "sci", "sports", "world"]);
        assert_eq!(store.members, vec![3, 3, 3, 3]);
        assert_eq!(store.layer_range(), (3, 5));
        assert_eq!(store.per_group_freq[0].len(), 2);
        for g in 0..4 {
            let total: u64 = store.per_group_freq[g].iter().map(FrequencyMap::total).sum();
            let expect: u64 = profiles
                .iter()
                .zip(&labels)
                .filter(|(_, l)| **l == store.labels[g])
                .map(|(p, _)| p.freq[3..].iter().map(FrequencyMap::total).sum::<u64>())
                .sum();
            assert_eq!(total, expect);
        }
    }

    #[test]
    fn labelled_store_is_order_invariant() {
        let (mut profiles, mut labels) = labelled_corpus();
        let a = build_group_store(&profiles, Some(&labels), &GroupStoreOptions::default()).unwrap();
        profiles.reverse();
        labels.reverse();
        let b = build_group_store(&profiles, Some(&labels), &GroupStoreOptions::default()).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.per_group_freq, b.per_group_freq);
        for (ca, cb) in a.centroids.iter().zip(&b.centroids) {
            for (x, y) in ca.iter().zip(cb) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_sentence_groups_reproduce_sentence_core() {
        let (profiles, labels) = labelled_corpus();
        let unique: Vec<String> = (0..profiles.len()).map(|i| format!("s{i:02}")).collect();
        let _ = labels;
        let opts = GroupStoreOptions { gamma: 0.5, ..Default::default() };
        let store = build_group_store(&profiles, Some(&unique), &opts).unwrap();
        for (g, p) in profiles.iter().enumerate() {
            assert_eq!(store.per_group_freq[g], p.freq[3..].to_vec());
            let plan = predict_similarity(&store, g).unwrap();
            for l in 3..5 {
                let expect = sentence_core(&p.freq[l], 0.4, 0.5).unwrap().neurons;
                assert_eq!(plan.set_for_layer(l).unwrap(), &expect);
            }
            assert!(plan.set_for_layer(2).is_none());
        }
    }

    #[test]
    fn disjoint_groups_give_disjoint_plans() {
        let (profiles, labels) = labelled_corpus();
        let store = build_group_store(&profiles, Some(&labels), &GroupStoreOptions::default()).unwrap();
        let a = predict_similarity(&store, 0).unwrap();
        let b = predict_similarity(&store, 1).unwrap();
        for l in 3..5 {
            assert_eq!(a.set_for_layer(l).unwrap().intersection_len(b.set_for_layer(l).unwrap()), 0);
        }
        let all = predict_similarity_with(&store, 0, 1.0).unwrap();
        assert_eq!(all.set_for_layer(3).unwrap(), &NeuronSet::from_indices(vec![4, 5]));
    }

    #[test]
    fn blobs_recover_k_and_centers() {
        let (points, _, centers) = gaussian_blobs(2, 6, 40, 10.0, 0.3, 3);
        let profiles: Vec<_> = points
            .iter()
            .map(|p| profile(&vec![vec![1u32; 6]; 5], p.clone()))
            .collect();
        let store = build_group_store(&profiles, None, &GroupStoreOptions::default()).unwrap();
        assert_eq!(store.k_groups(), 2);
        for c in &centers {
            let g = assign_group(&store, c).unwrap();
            let d = sq_dist(c, &store.centroids[g]).sqrt();
            assert!(d < 0.3, "centroid {g} is {d} from blob center");
        }
    }

    #[test]
    fn degenerate_and_small_inputs() {
        let p = profile(&vec![vec![1u32; 4]; 4], vec![0.5; 4]);
        let store = build_group_store(&[p.clone(), p.clone(), p.clone()], None, &GroupStoreOptions::default()).unwrap();
        assert_eq!(store.k_groups(), 1);
        assert!(build_group_store(std::slice::from_ref(&p), None, &GroupStoreOptions::default()).is_err());
        let opts = GroupStoreOptions { k: Some(5), ..Default::default() };
        let q = profile(&vec![vec![1u32; 4]; 4], vec![0.1; 4]);
        assert!(build_group_store(&[p, q], None, &opts).is_err());
    }

    #[test]
    fn assign_ties_and_centroids() {
        let (profiles, labels) = labelled_corpus();
        let mut store = build_group_store(&profiles, Some(&labels), &GroupStoreOptions::default()).unwrap();
        for g in 0..store.k_groups() {
            assert_eq!(assign_group(&store, &store.centroids[g].clone()).unwrap(), g);
        }
        store.centroids = vec![vec![1.0, 0.0], vec![-1.0, 0.0]];
        store.n_neurons = 2;
        assert_eq!(assign_group(&store, &[0.0, 3.0]).unwrap(), 0);
        assert!(assign_group(&store, &[0.0]).is_err());
    }

    #[test]
    fn stability_plan_is_identity() {
        let sets: Vec<SentenceCoreSet> = (0..4)
            .map(|l| SentenceCoreSet {
                layer: l,
                neurons: if l == 2 { NeuronSet::empty() } else { NeuronSet::from_indices(vec![l as u32]) },
                alpha: 0.4,
                beta: 0.2,
            })
            .collect();
        let plan = predict_stability(&sets, 4).unwrap();
        assert_eq!(plan, predict_stability(&sets, 4).unwrap());
        for s in &sets {
            assert_eq!(plan.set_for_layer(s.layer).unwrap(), &s.neurons);
        }
        assert!(plan.set_for_layer(2).unwrap().is_empty());
        assert!(predict_stability(&sets[..3], 4).is_err());
    }

    #[test]
    fn empty_group_is_an_error() {
        let (profiles, labels) = labelled_corpus();
        let mut store = build_group_store(&profiles, Some(&labels), &GroupStoreOptions::default()).unwrap();
        for m in &mut store.per_group_freq[1] {
            m.counts.fill(0);
        }
        assert!(matches!(predict_similarity(&store, 1), Err(Error::EmptyGroup(1))));
        assert!(matches!(predict_similarity(&store, 9), Err(Error::EmptyGroup(9))));
    }

    #[test]
    fn store_file_roundtrip_and_corruption() {
        let (profiles, labels) = labelled_corpus();
        let store = build_group_store(&profiles, Some(&labels), &GroupStoreOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("groups.cinfstore");
        save_store(&store, &path).unwrap();
        assert_eq!(load_store(&path).unwrap(), store);

        let mut bytes = std::fs::read(&path).unwrap();
        let i = bytes.len() - 10;
        bytes[i] ^= 0xff;
        assert!(matches!(decode_store(&bytes, &path), Err(Error::Checksum { .. })));

        let bytes = encode_store(&store).unwrap();
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[20..20 + hlen]).unwrap();
        for key in ["reference_layer", "k_groups", "gamma", "layer_range", "N", "L"] {
            assert!(header.get(key).is_some(), "missing {key}");
        }
    }

    proptest! {
        #[test]
        fn elbow_scale_invariant(
            drops in prop::collection::vec(0.0f64..50.0, 3..9),
            scale in 0.01f64..1000.0,
        ) {
            let mut w = 500.0;
            let pts: Vec<(usize, f64)> = drops.iter().enumerate().map(|(i, d)| { w -= d; (i + 1, w) }).collect();
            let scaled: Vec<(usize, f64)> = pts.iter().map(|&(k, v)| (k, v * scale)).collect();
            prop_assert_eq!(elbow_select_k(&pts).unwrap(), elbow_select_k(&scaled).unwrap());
        }

        #[test]
        fn similarity_plan_monotone_in_gamma(a in 1usize..=10, b in 1usize..=10) {
            let (profiles, labels) = labelled_corpus();
            let store = build_group_store(&profiles, Some(&labels), &GroupStoreOptions::default()).unwrap();
            let (lo, hi) = (a.min(b) as f64 / 10.0, a.max(b) as f64 / 10.0);
            for g in 0..store.k_groups() {
                let small = predict_similarity_with(&store, g, lo).unwrap();
                let large = predict_similarity_with(&store, g, hi).unwrap();
                for (s, l) in small.sets.iter().zip(&large.sets) {
                    prop_assert!(s.is_subset(l));
                }
            }
        }
    }
}

//! Seeded synthetic models and activation data for tests and benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::{ActivationKind, Model, ModelConfig, NormKind, PositionEncoding, RawTensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub activation_kind: ActivationKind,
    pub norm_kind: NormKind,
    pub position_encoding: PositionEncoding,
    pub bias: bool,
    /// Mean of the FFN up-projection bias. Positive values make more neurons
    /// fire for any given token.
    pub ffn_bias_mean: f32,
}

impl SyntheticSpec {
    /// ReLU/LayerNorm/learned-position model with 6 layers, `d_model` 64 and
    /// 256 FFN neurons.
    pub fn tiny() -> Self {
        Self {
            n_layers: 6,
            d_model: 64,
            d_ffn: 256,
            n_heads: 4,
            vocab_size: 256,
            max_seq_len: 512,
            activation_kind: ActivationKind::ReluFfn,
            norm_kind: NormKind::Layernorm,
            position_encoding: PositionEncoding::Learned,
            bias: true,
            ffn_bias_mean: 0.0,
        }
    }

    /// Gated-SiLU/RMSNorm/RoPE counterpart of [`SyntheticSpec::tiny`].
    pub fn tiny_gated() -> Self {
        Self {
            activation_kind: ActivationKind::SiluGatedFfn,
            norm_kind: NormKind::Rmsnorm,
            position_encoding: PositionEncoding::Rope,
            bias: false,
            ..Self::tiny()
        }
    }

    /// Wide-FFN model for timing the sparse FFN path.
    pub fn bench() -> Self {
        Self {
            n_layers: 4,
            d_model: 512,
            d_ffn: 4096,
            n_heads: 8,
            max_seq_len: 256,
            ..Self::tiny()
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            d_ffn: self.d_ffn,
            n_heads: self.n_heads,
            head_dim: self.d_model / self.n_heads,
            activation_kind: self.activation_kind,
            norm_kind: self.norm_kind,
            vocab_size: self.vocab_size,
            max_seq_len: self.max_seq_len,
            position_encoding: self.position_encoding,
            bias: self.bias,
            norm_eps: 1e-5,
            rope_theta: 10_000.0,
        }
    }
}

/// Byte-level vocabulary: printable ASCII maps to itself, other bytes to
/// `<0xNN>`.
pub fn byte_vocab(size: usize) -> Vec<String> {
    (0..size)
        .map(|i| match u8::try_from(i) {
            Ok(b) if (0x20..0x7f).contains(&b) || b == b'\n' => (b as char).to_string(),
            _ => format!("<0x{i:02X}>"),
        })
        .collect()
}

/// Random-weight model with the given architecture.
pub fn synthetic_model(spec: &SyntheticSpec, seed: u64) -> Result<Model> {
    let cfg = spec.config();
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |n: usize, std: f32, mean: f32| -> Vec<f32> {
        let dist = Normal::new(mean, std).expect("positive std");
        (0..n).map(|_| dist.sample(&mut rng)).collect()
    };
    let (d, n) = (cfg.d_model, cfg.d_ffn);
    let w_std = 1.0 / (d as f32).sqrt();
    let mut tensors = Vec::new();
    for (name, dims) in cfg.tensor_specs() {
        let numel = dims.iter().product();
        let data = if name.ends_with("norm.weight") {
            vec![1.0; numel]
        } else if name.ends_with("norm.bias") {
            vec![0.0; numel]
        } else if name == "tok_embeddings" {
            gauss(numel, 1.0, 0.0)
        } else if name == "pos_embeddings" {
            gauss(numel, 0.3, 0.0)
        } else if name.ends_with("ffn.up_bias") || name.ends_with("ffn.gate_bias") {
            gauss(numel, 0.1, spec.ffn_bias_mean)
        } else if name.ends_with("_bias") {
            gauss(numel, 0.02, 0.0)
        } else if name.ends_with("ffn.down") {
            // Transposed down projection: fan-in is d_ffn.
            gauss(numel, 1.0 / (n as f32).sqrt(), 0.0)
        } else {
            gauss(numel, w_std, 0.0)
        };
        tensors.push(RawTensor { name, dims, data });
    }
    Model::from_tensors(cfg, tensors, byte_vocab(spec.vocab_size))
}

/// Uniformly random token ids.
pub fn random_prompts(n: usize, len_range: std::ops::RangeInclusive<usize>, vocab: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.gen_range(len_range.clone());
            (0..len).map(|_| rng.gen_range(0..vocab as u32)).collect()
        })
        .collect()
}

/// Prompts whose tokens come from one of `topics` disjoint vocabulary
/// blocks. Returns `(prompts, labels)` with labels `topic{t}`; sequence `i`
/// belongs to topic `i % topics`.
pub fn topic_prompts(
    n: usize,
    topics: usize,
    len_range: std::ops::RangeInclusive<usize>,
    vocab: usize,
    seed: u64,
) -> (Vec<Vec<u32>>, Vec<String>) {
    assert!(topics >= 1 && topics <= vocab, "need 1..=vocab topics");
    let block = vocab / topics;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let t = i % topics;
            let len = rng.gen_range(len_range.clone());
            let lo = (t * block) as u32;
            let ids = (0..len).map(|_| rng.gen_range(lo..lo + block as u32)).collect();
            (ids, format!("topic{t}"))
        })
        .unzip()
}

/// STS-style pairs: both members share a topic with probability one half.
/// Same-topic pairs score in `[3, 5]`, cross-topic pairs in `[0, 2]`.
pub fn topic_pairs(
    n: usize,
    topics: usize,
    len_range: std::ops::RangeInclusive<usize>,
    vocab: usize,
    seed: u64,
) -> Vec<(Vec<u32>, Vec<u32>, f64)> {
    assert!(topics >= 2, "pairs need at least two topics");
    let block = vocab / topics;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng, t: usize| -> Vec<u32> {
        let len = rng.gen_range(len_range.clone());
        let lo = (t * block) as u32;
        (0..len).map(|_| rng.gen_range(lo..lo + block as u32)).collect()
    };
    (0..n)
        .map(|_| {
            let ta = rng.gen_range(0..topics);
            let same = rng.gen_bool(0.5);
            let tb = if same { ta } else { (ta + rng.gen_range(1..topics)) % topics };
            let a = draw(&mut rng, ta);
            let b = draw(&mut rng, tb);
            let jitter: f64 = rng.gen_range(0.0..2.0);
            let score = if same { 3.0 + jitter } else { jitter };
            (a, b, (score * 100.0).round() / 100.0)
        })
        .collect()
}

/// Token-activation stream whose mean pattern drifts from a random start to
/// a random target over `drift_tokens` tokens, then stays put. Each token is
/// `relu(mean + noise)`.
pub fn drifting_activation_stream(
    n_tokens: usize,
    n_neurons: usize,
    drift_tokens: usize,
    noise: f32,
    seed: u64,
) -> Vec<Vec<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, 1.0).unwrap();
    let start: Vec<f32> = (0..n_neurons).map(|_| normal.sample(&mut rng)).collect();
    let target: Vec<f32> = (0..n_neurons).map(|_| normal.sample(&mut rng)).collect();
    (0..n_tokens)
        .map(|t| {
            let w = if drift_tokens == 0 {
                1.0
            } else {
                (t as f32 / drift_tokens as f32).min(1.0)
            };
            (0..n_neurons)
                .map(|i| {
                    let mean = (1.0 - w) * start[i] + w * target[i];
                    (mean + noise * normal.sample(&mut rng)).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Isotropic Gaussian blobs: returns `(points, blob ids, centers)`.
/// Centers sit at `separation·σ` along distinct axes, scaled by `1/√2` so
/// pairwise center distance equals `separation·σ`.
pub fn gaussian_blobs(
    k: usize,
    dim: usize,
    per_blob: usize,
    separation: f32,
    sigma: f32,
    seed: u64,
) -> (Vec<Vec<f32>>, Vec<usize>, Vec<Vec<f32>>) {
    assert!(dim >= k, "need one axis per blob");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0f32, sigma).unwrap();
    let offset = separation * sigma / std::f32::consts::SQRT_2;
    let centers: Vec<Vec<f32>> = (0..k)
        .map(|b| {
            let mut c = vec![1.0; dim];
            c[b] += offset;
            c
        })
        .collect();
    let mut points = Vec::with_capacity(k * per_blob);
    let mut ids = Vec::with_capacity(k * per_blob);
    for i in 0..k * per_blob {
        let b = i % k;
        points.push(centers[b].iter().map(|&c| c + normal.sample(&mut rng)).collect());
        ids.push(b);
    }
    (points, ids, centers)
}

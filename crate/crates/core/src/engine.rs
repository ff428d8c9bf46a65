//! End-to-end generation: dense pre-fill with activation recording, core
//! neuron extraction, stability estimation, strategy selection, and a decode
//! loop that executes one frozen plan for every step.

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::core_neuron::{
    frequency_counts, sentence_core, stability_estimate, token_core_set, SentenceCoreSet, StabilityEstimate,
    TokenCoreSet,
};
use crate::error::{Error, Result};
use crate::model::{FfnStats, KvCache, Model};
use crate::plan::SparsePlan;
use crate::predictor::{assign_group, default_reference_layer, predict_similarity_with, predict_stability, SemanticGroupStore};
use crate::tensor::check_fraction;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyChoice {
    /// Stability-guided when the prompt's core set is stable, otherwise
    /// similarity-guided.
    #[default]
    Auto,
    ForceStability,
    ForceSimilarity,
    Dense,
}

impl std::str::FromStr for StrategyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Self::Auto),
            "force_stability" => Ok(Self::ForceStability),
            "force_similarity" => Ok(Self::ForceSimilarity),
            "dense" => Ok(Self::Dense),
            other => Err(Error::InvalidArgument(format!(
                "unknown strategy {other:?} (expected auto, force_stability, force_similarity or dense)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sampling {
    #[default]
    Greedy,
    TopK { k: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub tau_stability: f64,
    pub strategy: StrategyChoice,
    pub max_new_tokens: usize,
    pub sampling: Sampling,
    pub store_path: Option<PathBuf>,
    /// Layer used for stability estimation and group assignment. Defaults to
    /// the store's reference layer, else `floor(0.78·L)`.
    pub reference_layer: Option<usize>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.2,
            gamma: 0.2,
            tau_stability: 0.85,
            strategy: StrategyChoice::Auto,
            max_new_tokens: 32,
            sampling: Sampling::Greedy,
            store_path: None,
            reference_layer: None,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        check_fraction(self.alpha, "alpha")?;
        check_fraction(self.beta, "beta")?;
        check_fraction(self.gamma, "gamma")?;
        if !(self.tau_stability > 0.0 && self.tau_stability < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau_stability must be in (0, 1), got {}",
                self.tau_stability
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(Error::InvalidArgument("max_new_tokens must be at least 1".into()));
        }
        if let Sampling::TopK { k: 0, .. } = self.sampling {
            return Err(Error::InvalidArgument("top_k sampling needs k >= 1".into()));
        }
        Ok(())
    }
}

/// Output of the dense pre-fill and core extraction stage.
pub struct PrefillExtraction {
    pub kv: KvCache,
    pub logits: Vec<f32>,
    /// One sentence core set per layer.
    pub sentence_sets: Vec<SentenceCoreSet>,
    pub stability: StabilityEstimate,
    pub reference_layer: usize,
    /// Mean activation over prompt tokens at the reference layer.
    pub reference_mean: Vec<f32>,
    pub prefill_ms: f64,
    pub extract_ms: f64,
}

fn resolve_reference_layer(model: &Model, cfg: &GenerationConfig, store: Option<&SemanticGroupStore>) -> Result<usize> {
    let layer = cfg
        .reference_layer
        .or(store.map(|s| s.reference_layer))
        .unwrap_or_else(|| default_reference_layer(model.n_layers()));
    if layer >= model.n_layers() {
        return Err(Error::InvalidArgument(format!(
            "reference layer {layer} is out of range for {} layers",
            model.n_layers()
        )));
    }
    Ok(layer)
}

/// Sentence core sets for the first `prefix_len` tokens of each layer's
/// token core sets.
pub fn sentence_sets_from_tokens(
    per_layer: &[Vec<TokenCoreSet>],
    n_neurons: usize,
    prefix_len: usize,
    alpha: f64,
    beta: f64,
) -> Result<Vec<SentenceCoreSet>> {
    per_layer
        .iter()
        .enumerate()
        .map(|(l, sets)| {
            let freq = frequency_counts(l, n_neurons, &sets[..prefix_len.min(sets.len())])?;
            sentence_core(&freq, alpha, beta)
        })
        .collect()
}

pub fn prefill_and_extract(model: &Model, prompt: &[u32], cfg: &GenerationConfig) -> Result<PrefillExtraction> {
    prefill_and_extract_with(model, prompt, cfg, None)
}

pub(crate) fn prefill_and_extract_with(
    model: &Model,
    prompt: &[u32],
    cfg: &GenerationConfig,
    store: Option<&SemanticGroupStore>,
) -> Result<PrefillExtraction> {
    cfg.validate()?;
    let reference_layer = resolve_reference_layer(model, cfg, store)?;
    let (n_layers, n_neurons) = (model.n_layers(), model.n_neurons());

    let t0 = Instant::now();
    let out = model.forward_prefill(prompt, true)?;
    let prefill_ms = t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let records = out.records.expect("recording requested");
    let mut per_layer: Vec<Vec<TokenCoreSet>> = vec![Vec::with_capacity(prompt.len()); n_layers];
    let mut ref_sum = vec![0.0f64; n_neurons];
    for r in &records {
        per_layer[r.layer].push(token_core_set(r.layer, r.token_pos, &r.values, cfg.alpha)?);
        if r.layer == reference_layer {
            for (s, &v) in ref_sum.iter_mut().zip(&r.values) {
                *s += v as f64;
            }
        }
    }
    let m = prompt.len();
    let sentence_sets = sentence_sets_from_tokens(&per_layer, n_neurons, m, cfg.alpha, cfg.beta)?;
    let half = m.div_ceil(2);
    let prefix_freq = frequency_counts(reference_layer, n_neurons, &per_layer[reference_layer][..half])?;
    let prefix_set = sentence_core(&prefix_freq, cfg.alpha, cfg.beta)?;
    let stability = stability_estimate(&prefix_set, &sentence_sets[reference_layer], cfg.tau_stability)?;
    let reference_mean = ref_sum.iter().map(|&s| (s / m as f64) as f32).collect();
    let extract_ms = t1.elapsed().as_secs_f64() * 1e3;

    Ok(PrefillExtraction {
        kv: out.kv,
        logits: out.logits,
        sentence_sets,
        stability,
        reference_layer,
        reference_mean,
        prefill_ms,
        extract_ms,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResolvedStrategy {
    Dense,
    Stability,
    Similarity,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub prefill_ms: f64,
    pub extract_ms: f64,
    pub plan_ms: f64,
    pub decode_ms: f64,
    pub ffn_decode_ms: f64,
}

/// Structured result of [`generate`]; serialized as the run report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub prompt_len: usize,
    pub generated_ids: Vec<u32>,
    pub text: String,
    pub requested_strategy: StrategyChoice,
    pub strategy: ResolvedStrategy,
    pub group: Option<usize>,
    pub group_label: Option<String>,
    pub reference_layer: usize,
    pub stability_similarity: f64,
    pub stable: bool,
    /// Neurons executed per layer during decode.
    pub layer_set_sizes: Vec<usize>,
    pub ffn_flops_dense_equivalent: u64,
    pub ffn_flops_actual: u64,
    pub ffn_flop_ratio: f64,
    pub timings: Timings,
    /// Digest of the plan frozen before the first decode step.
    pub plan_hash: Option<String>,
    /// Digest of the plan used at each decode step.
    pub step_plan_hashes: Vec<String>,
    pub config: GenerationConfig,
}

fn sample(logits: &[f32], sampling: Sampling, rng: &mut Option<ChaCha8Rng>) -> u32 {
    match sampling {
        Sampling::Greedy => argmax(logits),
        Sampling::TopK { k, .. } => {
            let rng = rng.as_mut().expect("rng seeded for top-k");
            let mut idx: Vec<usize> = (0..logits.len()).collect();
            idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            idx.truncate(k.min(logits.len()));
            let max = logits[idx[0]] as f64;
            let weights: Vec<f64> = idx.iter().map(|&i| (logits[i] as f64 - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.gen::<f64>() * total;
            for (&i, w) in idx.iter().zip(&weights) {
                if u < *w {
                    return i as u32;
                }
                u -= w;
            }
            *idx.last().unwrap() as u32
        }
    }
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax(logits: &[f32]) -> u32 {
    let mut best = 0;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

pub fn generate(
    model: &Model,
    prompt: &[u32],
    cfg: &GenerationConfig,
    store: Option<&SemanticGroupStore>,
) -> Result<GenerationReport> {
    cfg.validate()?;
    if let Some(s) = store {
        if s.n_neurons != model.n_neurons() || s.n_layers != model.n_layers() {
            return Err(Error::InvalidArgument(format!(
                "store was built for L={} N={}, model has L={} N={}",
                s.n_layers,
                s.n_neurons,
                model.n_layers(),
                model.n_neurons()
            )));
        }
    }
    if cfg.strategy == StrategyChoice::ForceSimilarity && store.is_none() {
        return Err(Error::MissingStore);
    }
    let ex = prefill_and_extract_with(model, prompt, cfg, store)?;

    let t_plan = Instant::now();
    let stable = ex.stability.verdict == crate::core_neuron::Stability::Stable;
    let resolved = match cfg.strategy {
        StrategyChoice::Dense => ResolvedStrategy::Dense,
        StrategyChoice::ForceStability => ResolvedStrategy::Stability,
        StrategyChoice::ForceSimilarity => ResolvedStrategy::Similarity,
        StrategyChoice::Auto if stable => ResolvedStrategy::Stability,
        StrategyChoice::Auto => ResolvedStrategy::Similarity,
    };
    let (plan, group): (Option<SparsePlan>, Option<usize>) = match resolved {
        ResolvedStrategy::Dense => (None, None),
        ResolvedStrategy::Stability => (Some(predict_stability(&ex.sentence_sets, model.n_layers())?), None),
        ResolvedStrategy::Similarity => {
            let store = store.ok_or(Error::MissingStore)?;
            let g = assign_group(store, &ex.reference_mean)?;
            (Some(predict_similarity_with(store, g, cfg.gamma)?), Some(g))
        }
    };
    if let Some(p) = &plan {
        model.check_plan(p)?;
    }
    let plan_hash = plan.as_ref().map(SparsePlan::digest);
    let plan_ms = t_plan.elapsed().as_secs_f64() * 1e3;

    let mut rng = match cfg.sampling {
        Sampling::TopK { seed, .. } => Some(ChaCha8Rng::seed_from_u64(seed)),
        Sampling::Greedy => None,
    };
    let mut kv = ex.kv;
    let mut stats = FfnStats::default();
    let mut step_plan_hashes = Vec::new();
    let mut generated = vec![sample(&ex.logits, cfg.sampling, &mut rng)];
    let t_decode = Instant::now();
    while generated.len() < cfg.max_new_tokens {
        if kv.is_full() {
            log::warn!("stopping at max_seq_len {} after {} new tokens", kv.max_len(), generated.len());
            break;
        }
        let last = *generated.last().unwrap();
        let logits = model.decode_step(last, &mut kv, plan.as_ref(), Some(&mut stats))?;
        if let Some(p) = &plan {
            step_plan_hashes.push(p.digest());
        }
        generated.push(sample(&logits, cfg.sampling, &mut rng));
    }
    let decode_ms = t_decode.elapsed().as_secs_f64() * 1e3;

    let layer_set_sizes = match &plan {
        Some(p) => p.active_neurons(model.n_layers(), model.n_neurons()),
        None => vec![model.n_neurons(); model.n_layers()],
    };
    let group_label = match (store, group) {
        (Some(s), Some(g)) => Some(s.labels[g].clone()),
        _ => None,
    };
    Ok(GenerationReport {
        prompt_len: prompt.len(),
        text: model.detokenize(&generated),
        generated_ids: generated,
        requested_strategy: cfg.strategy,
        strategy: resolved,
        group,
        group_label,
        reference_layer: ex.reference_layer,
        stability_similarity: ex.stability.similarity,
        stable,
        layer_set_sizes,
        ffn_flops_dense_equivalent: stats.flops_dense_equivalent,
        ffn_flops_actual: stats.flops_actual,
        ffn_flop_ratio: stats.flop_ratio(),
        timings: Timings {
            prefill_ms: ex.prefill_ms,
            extract_ms: ex.extract_ms,
            plan_ms,
            decode_ms,
            ffn_decode_ms: stats.ffn_time.as_secs_f64() * 1e3,
        },
        plan_hash,
        step_plan_hashes,
        config: cfg.clone(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditResult {
    pub passed: bool,
    pub steps_checked: usize,
    /// Decode steps whose plan digest differed from the frozen one.
    pub mismatched_steps: Vec<usize>,
}

/// Checks that every decode step ran the plan frozen after pre-fill. Dense
/// runs pass vacuously.
pub fn plan_freeze_audit(report: &GenerationReport) -> AuditResult {
    let mismatched_steps: Vec<usize> = match &report.plan_hash {
        Some(h) => report
            .step_plan_hashes
            .iter()
            .enumerate()
            .filter(|(_, s)| *s != h)
            .map(|(i, _)| i)
            .collect(),
        None => (0..report.step_plan_hashes.len()).collect(),
    };
    AuditResult {
        passed: mismatched_steps.is_empty(),
        steps_checked: report.step_plan_hashes.len(),
        mismatched_steps,
    }
}

/// Dense greedy reference loop built directly on the model API.
pub fn dense_greedy(model: &Model, prompt: &[u32], max_new_tokens: usize) -> Result<Vec<u32>> {
    let out = model.forward_prefill(prompt, false)?;
    let mut kv = out.kv;
    let mut generated = vec![argmax(&out.logits)];
    while generated.len() < max_new_tokens && !kv.is_full() {
        let logits = model.forward_decode_dense(*generated.last().unwrap(), &mut kv)?;
        generated.push(argmax(&logits));
    }
    Ok(generated)
}

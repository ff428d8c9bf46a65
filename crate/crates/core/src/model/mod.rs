//! Decoder-only transformer runtime: bundle loading, KV cache, dense and
//! plan-restricted forward passes.
//!
//! Pre-fill runs the same single-position step as decoding, once per prompt
//! token, so pre-fill and decode logits agree exactly. FFN weights are stored
//! one neuron per row (`up`, `gate` and the transposed `down` are all
//! `[d_ffn, d_model]`), which makes a neuron subset a set of contiguous rows.

pub mod bundle;
pub mod config;

use std::collections::HashMap;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use self::bundle::RawTensor;
pub use self::config::{ActivationKind, ModelConfig, NormKind, PositionEncoding};
use crate::error::{Error, Result};
use crate::plan::SparsePlan;
use crate::tensor::{
    dot, layernorm_into, masked_matvec_into, matvec_into, rmsnorm_into, silu_scalar,
    softmax_in_place, weighted_row_sum_into, Matrix, OpCounter,
};

pub const CONFIG_FILE: &str = "config.json";
pub const WEIGHTS_FILE: &str = "weights.cinf";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Clone, Debug)]
struct Norm {
    gain: Vec<f32>,
    bias: Option<Vec<f32>>,
}

impl Norm {
    fn apply(&self, x: &[f32], eps: f32, out: &mut [f32]) {
        match &self.bias {
            Some(b) => layernorm_into(x, &self.gain, b, eps, out),
            None => rmsnorm_into(x, &self.gain, eps, out),
        }
    }
}

#[derive(Clone, Debug)]
struct Projection {
    weight: Matrix,
    bias: Option<Vec<f32>>,
}

impl Projection {
    fn apply(&self, x: &[f32], out: &mut [f32]) {
        matvec_into(&self.weight, x, out, None);
        if let Some(b) = &self.bias {
            for (o, b) in out.iter_mut().zip(b) {
                *o += b;
            }
        }
    }
}

#[derive(Clone, Debug)]
struct Layer {
    attn_norm: Norm,
    wq: Projection,
    wk: Projection,
    wv: Projection,
    wo: Projection,
    ffn_norm: Norm,
    gate: Option<Matrix>,
    gate_bias: Option<Vec<f32>>,
    up: Matrix,
    up_bias: Option<Vec<f32>>,
    down: Matrix,
    down_bias: Option<Vec<f32>>,
}

/// Post-nonlinearity FFN hidden vector for one token at one layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    pub layer: usize,
    pub token_pos: usize,
    pub values: Vec<f32>,
}

/// Per-layer keys and values, `[positions, n_heads, head_dim]` flattened.
#[derive(Clone, Debug)]
pub struct KvCache {
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    len: usize,
    max_len: usize,
}

impl KvCache {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            keys: vec![Vec::with_capacity(cfg.d_model * 64); cfg.n_layers],
            values: vec![Vec::with_capacity(cfg.d_model * 64); cfg.n_layers],
            len: 0,
            max_len: cfg.max_seq_len,
        }
    }

    pub fn current_len(&self) -> usize {
        self.len
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn is_full(&self) -> bool {
        self.len >= self.max_len
    }
}

/// FFN accounting gathered across forward steps.
#[derive(Debug, Default)]
pub struct FfnStats {
    /// Multiplies actually executed inside FFN kernels.
    pub counter: OpCounter,
    pub flops_dense_equivalent: u64,
    pub flops_actual: u64,
    pub ffn_time: Duration,
    pub steps: u64,
}

impl FfnStats {
    pub fn flop_ratio(&self) -> f64 {
        if self.flops_dense_equivalent == 0 {
            1.0
        } else {
            self.flops_actual as f64 / self.flops_dense_equivalent as f64
        }
    }
}

pub struct PrefillOutput {
    /// Logits at the last prompt position.
    pub logits: Vec<f32>,
    pub kv: KvCache,
    /// `n_layers × prompt_len` records, position-major.
    pub records: Option<Vec<ActivationRecord>>,
    /// Logits at every position when requested.
    pub all_logits: Option<Vec<Vec<f32>>>,
}

#[derive(Clone, Copy)]
struct StepOptions<'a> {
    plan: Option<&'a SparsePlan>,
    record: bool,
    logits: bool,
}

/// An immutable, thread-shareable model.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    tok_embeddings: Matrix,
    pos_embeddings: Option<Matrix>,
    layers: Vec<Layer>,
    final_norm: Norm,
    lm_head: Matrix,
    vocab: Vec<String>,
}

impl Model {
    /// Builds a model from named tensors, checking that the set of names and
    /// every shape match the config exactly.
    pub fn from_tensors(cfg: ModelConfig, tensors: Vec<RawTensor>, vocab: Vec<String>) -> Result<Self> {
        cfg.validate()?;
        if vocab.len() != cfg.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "vocab has {} entries, config declares {}",
                vocab.len(),
                cfg.vocab_size
            )));
        }
        let specs: HashMap<String, Vec<usize>> = cfg.tensor_specs().into_iter().collect();
        let mut by_name: HashMap<String, RawTensor> = HashMap::with_capacity(tensors.len());
        for t in tensors {
            let Some(expected) = specs.get(&t.name) else {
                return Err(Error::UnexpectedTensor(t.name));
            };
            if *expected != t.dims || t.data.len() != t.dims.iter().product::<usize>() {
                return Err(Error::TensorShape {
                    name: t.name,
                    expected: expected.clone(),
                    found: t.dims,
                });
            }
            if t.data.iter().any(|x| !x.is_finite()) {
                return Err(Error::Malformed {
                    path: WEIGHTS_FILE.into(),
                    reason: format!("tensor {} contains non-finite values", t.name),
                });
            }
            by_name.insert(t.name.clone(), t);
        }

        let mut take = |name: &str| -> Result<RawTensor> {
            by_name
                .remove(name)
                .ok_or_else(|| Error::MissingTensor(name.to_string()))
        };
        let mut matrix = |name: &str| -> Result<Matrix> {
            let t = take(name)?;
            Matrix::new(t.dims[0], t.dims[1], t.data)
        };
        let tok_embeddings = matrix("tok_embeddings")?;
        let pos_embeddings = match cfg.position_encoding {
            PositionEncoding::Learned => Some(matrix("pos_embeddings")?),
            PositionEncoding::Rope => None,
        };

        let mut vector = |name: &str| -> Result<Vec<f32>> { Ok(take(name)?.data) };
        let layernorm = cfg.norm_kind == NormKind::Layernorm;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            let attn_norm = Norm {
                gain: vector(&format!("{p}.attn_norm.weight"))?,
                bias: if layernorm { Some(vector(&format!("{p}.attn_norm.bias"))?) } else { None },
            };
            let (d, n) = (cfg.d_model, cfg.d_ffn);
            let mut proj = |w: &str| -> Result<Projection> {
                let weight = Matrix::new(d, d, vector(&format!("{p}.attn.{w}"))?)?;
                let bias = if cfg.bias { Some(vector(&format!("{p}.attn.{w}_bias"))?) } else { None };
                Ok(Projection { weight, bias })
            };
            let (wq, wk, wv, wo) = (proj("wq")?, proj("wk")?, proj("wv")?, proj("wo")?);
            let ffn_norm = Norm {
                gain: vector(&format!("{p}.ffn_norm.weight"))?,
                bias: if layernorm { Some(vector(&format!("{p}.ffn_norm.bias"))?) } else { None },
            };
            let (gate, gate_bias) = if cfg.is_gated() {
                let g = Matrix::new(n, d, vector(&format!("{p}.ffn.gate"))?)?;
                let b = if cfg.bias { Some(vector(&format!("{p}.ffn.gate_bias"))?) } else { None };
                (Some(g), b)
            } else {
                (None, None)
            };
            let up = Matrix::new(n, d, vector(&format!("{p}.ffn.up"))?)?;
            let up_bias = if cfg.bias { Some(vector(&format!("{p}.ffn.up_bias"))?) } else { None };
            let down = Matrix::new(n, d, vector(&format!("{p}.ffn.down"))?)?;
            let down_bias = if cfg.bias { Some(vector(&format!("{p}.ffn.down_bias"))?) } else { None };
            layers.push(Layer {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                ffn_norm,
                gate,
                gate_bias,
                up,
                up_bias,
                down,
                down_bias,
            });
        }
        let final_norm = Norm {
            gain: vector("final_norm.weight")?,
            bias: if layernorm { Some(vector("final_norm.bias")?) } else { None },
        };
        let lm = take("lm_head")?;
        let lm_head = Matrix::new(lm.dims[0], lm.dims[1], lm.data)?;

        Ok(Self {
            cfg,
            tok_embeddings,
            pos_embeddings,
            layers,
            final_norm,
            lm_head,
            vocab,
        })
    }

    /// Loads a bundle directory (`config.json`, `weights.cinf`, `vocab.json`).
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = ModelConfig::load(&dir.join(CONFIG_FILE))?;
        let tensors = bundle::read(&dir.join(WEIGHTS_FILE))?;
        let vocab_path = dir.join(VOCAB_FILE);
        let text = std::fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
        let vocab: Vec<String> =
            serde_json::from_str(&text).map_err(|e| Error::json(vocab_path.display().to_string(), e))?;
        Self::from_tensors(cfg, tensors, vocab)
    }

    /// Writes the model as a bundle directory.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cfg_json = serde_json::to_string_pretty(&self.cfg).map_err(|e| Error::json("config", e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        std::fs::write(&cfg_path, cfg_json).map_err(|e| Error::io(&cfg_path, e))?;
        bundle::write(&dir.join(WEIGHTS_FILE), &self.to_tensors())?;
        let vocab_json = serde_json::to_string(&self.vocab).map_err(|e| Error::json("vocab", e))?;
        let vocab_path = dir.join(VOCAB_FILE);
        std::fs::write(&vocab_path, vocab_json).map_err(|e| Error::io(&vocab_path, e))
    }

    /// Tensors in bundle order.
    pub fn to_tensors(&self) -> Vec<RawTensor> {
        let mut out = Vec::new();
        let mut push = |name: String, dims: Vec<usize>, data: &[f32]| {
            out.push(RawTensor {
                name,
                dims,
                data: data.to_vec(),
            })
        };
        let m = |x: &Matrix| vec![x.rows(), x.cols()];
        push("tok_embeddings".into(), m(&self.tok_embeddings), self.tok_embeddings.data());
        if let Some(p) = &self.pos_embeddings {
            push("pos_embeddings".into(), m(p), p.data());
        }
        let norm = |push: &mut dyn FnMut(String, Vec<usize>, &[f32]), prefix: &str, n: &Norm| {
            push(format!("{prefix}.weight"), vec![n.gain.len()], &n.gain);
            if let Some(b) = &n.bias {
                push(format!("{prefix}.bias"), vec![b.len()], b);
            }
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            norm(&mut push, &format!("{p}.attn_norm"), &layer.attn_norm);
            for (w, proj) in [("wq", &layer.wq), ("wk", &layer.wk), ("wv", &layer.wv), ("wo", &layer.wo)] {
                push(format!("{p}.attn.{w}"), m(&proj.weight), proj.weight.data());
                if let Some(b) = &proj.bias {
                    push(format!("{p}.attn.{w}_bias"), vec![b.len()], b);
                }
            }
            norm(&mut push, &format!("{p}.ffn_norm"), &layer.ffn_norm);
            if let Some(g) = &layer.gate {
                push(format!("{p}.ffn.gate"), m(g), g.data());
            }
            if let Some(b) = &layer.gate_bias {
                push(format!("{p}.ffn.gate_bias"), vec![b.len()], b);
            }
            push(format!("{p}.ffn.up"), m(&layer.up), layer.up.data());
            if let Some(b) = &layer.up_bias {
                push(format!("{p}.ffn.up_bias"), vec![b.len()], b);
            }
            push(format!("{p}.ffn.down"), m(&layer.down), layer.down.data());
            if let Some(b) = &layer.down_bias {
                push(format!("{p}.ffn.down_bias"), vec![b.len()], b);
            }
        }
        norm(&mut push, "final_norm", &self.final_norm);
        push("lm_head".into(), m(&self.lm_head), self.lm_head.data());
        out
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn n_layers(&self) -> usize {
        self.cfg.n_layers
    }

    pub fn n_neurons(&self) -> usize {
        self.cfg.d_ffn
    }

    pub fn detokenize(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter_map(|&id| self.vocab.get(id as usize))
            .map(String::as_str)
            .collect()
    }

    /// Greedy longest-match encoding against the detokenization vocabulary.
    /// Only an approximation of the source tokenizer; ties between equal
    /// strings go to the lower id.
    pub fn encode_with_vocab(&self, text: &str) -> Result<Vec<u32>> {
        let mut by_piece: std::collections::HashMap<&str, u32> = std::collections::HashMap::new();
        let mut longest = 0;
        for (id, piece) in self.vocab.iter().enumerate() {
            if !piece.is_empty() {
                by_piece.entry(piece.as_str()).or_insert(id as u32);
                longest = longest.max(piece.len());
            }
        }
        let mut ids = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let mut end = rest.len().min(longest);
            loop {
                while !rest.is_char_boundary(end) {
                    end -= 1;
                }
                if end == 0 {
                    let c = rest.chars().next().expect("nonempty");
                    return Err(Error::InvalidArgument(format!(
                        "character {c:?} at byte {} is not covered by the vocabulary",
                        text.len() - rest.len()
                    )));
                }
                if let Some(&id) = by_piece.get(&rest[..end]) {
                    ids.push(id);
                    rest = &rest[end..];
                    break;
                }
                end -= 1;
            }
        }
        Ok(ids)
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(&self.cfg)
    }

    fn check_token(&self, id: u32) -> Result<()> {
        if (id as usize) < self.cfg.vocab_size {
            Ok(())
        } else {
            Err(Error::UnknownToken {
                id,
                vocab: self.cfg.vocab_size,
            })
        }
    }

    fn check_prompt(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyPrompt);
        }
        if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::PromptTooLong {
                len: tokens.len(),
                max: self.cfg.max_seq_len,
            });
        }
        tokens.iter().try_for_each(|&t| self.check_token(t))
    }

    /// Dense pre-fill. With `record`, returns one [`ActivationRecord`] per
    /// layer per prompt token.
    pub fn forward_prefill(&self, tokens: &[u32], record: bool) -> Result<PrefillOutput> {
        self.prefill_with(tokens, record, false, None)
    }

    /// Pre-fill that also returns logits at every prompt position.
    pub fn forward_prefill_all_logits(&self, tokens: &[u32]) -> Result<PrefillOutput> {
        self.prefill_with(tokens, false, true, None)
    }

    pub(crate) fn prefill_with(
        &self,
        tokens: &[u32],
        record: bool,
        all_logits: bool,
        mut stats: Option<&mut FfnStats>,
    ) -> Result<PrefillOutput> {
        self.check_prompt(tokens)?;
        let mut kv = self.new_cache();
        let mut records = record.then(|| Vec::with_capacity(tokens.len() * self.cfg.n_layers));
        let mut every = all_logits.then(|| Vec::with_capacity(tokens.len()));
        let mut last = Vec::new();
        for (i, &t) in tokens.iter().enumerate() {
            let is_last = i + 1 == tokens.len();
            let opts = StepOptions {
                plan: None,
                record,
                logits: is_last || all_logits,
            };
            let (logits, recs) = self.step(t, &mut kv, opts, stats.as_deref_mut());
            if let (Some(all), Some(r)) = (records.as_mut(), recs) {
                all.extend(r);
            }
            if let Some(l) = logits {
                if let Some(e) = every.as_mut() {
                    e.push(l.clone());
                }
                if is_last {
                    last = l;
                }
            }
        }
        Ok(PrefillOutput {
            logits: last,
            kv,
            records,
            all_logits: every,
        })
    }

    fn check_decode(&self, token: u32, kv: &KvCache) -> Result<()> {
        self.check_token(token)?;
        if kv.len == 0 {
            return Err(Error::EmptyCache);
        }
        if kv.is_full() {
            return Err(Error::CacheOverflow {
                len: kv.len,
                max: kv.max_len,
            });
        }
        Ok(())
    }

    pub fn forward_decode_dense(&self, token: u32, kv: &mut KvCache) -> Result<Vec<f32>> {
        self.decode_step(token, kv, None, None)
    }

    /// Decode step whose in-range FFNs execute only the plan's neurons.
    pub fn forward_decode_sparse(&self, token: u32, kv: &mut KvCache, plan: &SparsePlan) -> Result<Vec<f32>> {
        self.check_plan(plan)?;
        self.decode_step(token, kv, Some(plan), None)
    }

    /// Validates a plan against this model and warns about empty layers.
    pub fn check_plan(&self, plan: &SparsePlan) -> Result<()> {
        plan.validate(self.cfg.n_layers, self.cfg.d_ffn)?;
        for l in plan.empty_layers() {
            log::warn!("plan has an empty neuron set at layer {l}; its FFN adds only the output bias");
        }
        Ok(())
    }

    /// Single decode step. `plan` must already have passed [`Model::check_plan`].
    pub fn decode_step(
        &self,
        token: u32,
        kv: &mut KvCache,
        plan: Option<&SparsePlan>,
        stats: Option<&mut FfnStats>,
    ) -> Result<Vec<f32>> {
        self.check_decode(token, kv)?;
        if let Some(p) = plan {
            if p.layer_end > self.cfg.n_layers {
                return Err(Error::InvalidPlan(format!(
                    "plan covers layers up to {} but the model has {}",
                    p.layer_end, self.cfg.n_layers
                )));
            }
        }
        let opts = StepOptions {
            plan,
            record: false,
            logits: true,
        };
        let (logits, _) = self.step(token, kv, opts, stats);
        Ok(logits.expect("logits requested"))
    }

    /// One position through every layer. Appends to `kv`.
    fn step(
        &self,
        token: u32,
        kv: &mut KvCache,
        opts: StepOptions<'_>,
        mut stats: Option<&mut FfnStats>,
    ) -> (Option<Vec<f32>>, Option<Vec<ActivationRecord>>) {
        let cfg = &self.cfg;
        let d = cfg.d_model;
        let pos = kv.len;
        let mut x = self.tok_embeddings.row(token as usize).to_vec();
        if let Some(p) = &self.pos_embeddings {
            for (xi, pi) in x.iter_mut().zip(p.row(pos)) {
                *xi += pi;
            }
        }

        let mut normed = vec![0.0; d];
        let mut q = vec![0.0; d];
        let mut k = vec![0.0; d];
        let mut v = vec![0.0; d];
        let mut attn = vec![0.0; d];
        let mut proj = vec![0.0; d];
        let mut ffn_out = vec![0.0; d];
        let mut hidden = vec![0.0; cfg.d_ffn];
        let mut gate = vec![0.0; if cfg.is_gated() { cfg.d_ffn } else { 0 }];
        let mut scores = Vec::with_capacity(pos + 1);
        let mut records = opts.record.then(|| Vec::with_capacity(cfg.n_layers));

        for (l, layer) in self.layers.iter().enumerate() {
            layer.attn_norm.apply(&x, cfg.norm_eps, &mut normed);
            layer.wq.apply(&normed, &mut q);
            layer.wk.apply(&normed, &mut k);
            layer.wv.apply(&normed, &mut v);
            if cfg.position_encoding == PositionEncoding::Rope {
                self.rope(&mut q, pos);
                self.rope(&mut k, pos);
            }
            kv.keys[l].extend_from_slice(&k);
            kv.values[l].extend_from_slice(&v);
            self.attention(&q, &kv.keys[l], &kv.values[l], pos + 1, &mut scores, &mut attn);
            layer.wo.apply(&attn, &mut proj);
            for (xi, p) in x.iter_mut().zip(&proj) {
                *xi += p;
            }

            layer.ffn_norm.apply(&x, cfg.norm_eps, &mut normed);
            let rows = opts.plan.and_then(|p| p.set_for_layer(l)).map(|s| s.as_slice());
            let active = rows.map_or(cfg.d_ffn, <[u32]>::len);
            let started = stats.is_some().then(Instant::now);
            let counter = stats.as_deref().map(|s| &s.counter);
            let h = &mut hidden[..active];
            self.ffn(layer, &normed, rows, h, &mut gate[..if cfg.is_gated() { active } else { 0 }], &mut ffn_out, counter);
            if let Some(s) = stats.as_deref_mut() {
                s.ffn_time += started.unwrap().elapsed();
                s.flops_actual += cfg.ffn_flops(active);
                s.flops_dense_equivalent += cfg.ffn_flops(cfg.d_ffn);
            }
            if let Some(r) = records.as_mut() {
                // Recording only happens on dense passes, so `h` covers every neuron.
                r.push(ActivationRecord {
                    layer: l,
                    token_pos: pos,
                    values: h.to_vec(),
                });
            }
            for (xi, f) in x.iter_mut().zip(&ffn_out) {
                *xi += f;
            }
        }
        kv.len += 1;
        if let Some(s) = stats {
            s.steps += 1;
        }

        let logits = opts.logits.then(|| {
            self.final_norm.apply(&x, cfg.norm_eps, &mut normed);
            let mut out = vec![0.0; cfg.vocab_size];
            matvec_into(&self.lm_head, &normed, &mut out, None);
            out
        });
        (logits, records)
    }

    /// FFN over the neurons in `rows` (all neurons when `None`). `hidden`
    /// receives the post-nonlinearity values of the participating neurons.
    #[allow(clippy::too_many_arguments)]
    fn ffn(
        &self,
        layer: &Layer,
        x: &[f32],
        rows: Option<&[u32]>,
        hidden: &mut [f32],
        gate: &mut [f32],
        out: &mut [f32],
        counter: Option<&OpCounter>,
    ) {
        let bias_at = |b: &Option<Vec<f32>>, j: usize| -> f32 {
            b.as_ref().map_or(0.0, |b| b[rows.map_or(j, |r| r[j] as usize)])
        };
        match rows {
            Some(r) => masked_matvec_into(&layer.up, x, r, hidden, counter),
            None => matvec_into(&layer.up, x, hidden, counter),
        }
        for (j, h) in hidden.iter_mut().enumerate() {
            *h += bias_at(&layer.up_bias, j);
        }
        match &layer.gate {
            Some(g) => {
                match rows {
                    Some(r) => masked_matvec_into(g, x, r, gate, counter),
                    None => matvec_into(g, x, gate, counter),
                }
                for (j, (h, gv)) in hidden.iter_mut().zip(gate.iter()).enumerate() {
                    *h *= silu_scalar(gv + bias_at(&layer.gate_bias, j));
                }
            }
            None => {
                for h in hidden.iter_mut() {
                    *h = h.max(0.0);
                }
            }
        }
        weighted_row_sum_into(&layer.down, hidden, rows, out, counter);
        if let Some(b) = &layer.down_bias {
            for (o, b) in out.iter_mut().zip(b) {
                *o += b;
            }
        }
    }

    fn rope(&self, v: &mut [f32], pos: usize) {
        let hd = self.cfg.head_dim;
        let half = hd / 2;
        for head in v.chunks_mut(hd) {
            for i in 0..half {
                let freq = (self.cfg.rope_theta as f64).powf(-(2.0 * i as f64) / hd as f64);
                let angle = pos as f64 * freq;
                let (sin, cos) = (angle.sin() as f32, angle.cos() as f32);
                let (a, b) = (head[i], head[i + half]);
                head[i] = a * cos - b * sin;
                head[i + half] = a * sin + b * cos;
            }
        }
    }

    fn attention(&self, q: &[f32], keys: &[f32], values: &[f32], n_pos: usize, scores: &mut Vec<f32>, out: &mut [f32]) {
        let (d, hd) = (self.cfg.d_model, self.cfg.head_dim);
        let scale = 1.0 / (hd as f32).sqrt();
        out.fill(0.0);
        for h in 0..self.cfg.n_heads {
            let qh = &q[h * hd..(h + 1) * hd];
            scores.clear();
            for t in 0..n_pos {
                scores.push(dot(qh, &keys[t * d + h * hd..t * d + (h + 1) * hd]) * scale);
            }
            softmax_in_place(scores);
            let oh = &mut out[h * hd..(h + 1) * hd];
            for (t, &p) in scores.iter().enumerate() {
                for (o, vv) in oh.iter_mut().zip(&values[t * d + h * hd..t * d + (h + 1) * hd]) {
                    *o += p * vv;
                }
            }
        }
    }
}

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::anyhow;
use coreinfer::core_neuron::{core_similarity, frequency_counts, token_core_set, TokenCoreSet};
use coreinfer::engine::{generate, sentence_sets_from_tokens, GenerationConfig, Sampling};
use coreinfer::evalbench::{
    bench_decode, perplexity, spearman_core_vs_semantic, sweep, write_bench_csv, BenchArm, BenchOptions,
    EvalCorpus, LabeledPair, PerplexityMode,
};
use coreinfer::predictor::{
    assign_group, build_group_store, default_reference_layer, load_store, save_store, GroupStoreOptions,
    SentenceProfile,
};
use coreinfer::synth::{random_prompts, synthetic_model, topic_pairs, topic_prompts, SyntheticSpec};
use coreinfer::{Error, Model};
use serde::Serialize;

use crate::args::{
    AnalyzeArgs, BenchArgs, ClusterArgs, EvalArgs, EvalKind, GenFlags, PplMode, Preset, RunArgs, SynthArgs,
};
use crate::manifest::RunManifest;
use crate::Failure;

fn load_model(dir: &Path, m: &mut RunManifest) -> Result<Model, Failure> {
    m.input("model", dir);
    Model::load(dir).map_err(Failure::model)
}

fn load_corpus(path: &Path, m: &mut RunManifest) -> Result<EvalCorpus, Failure> {
    m.input("corpus", path);
    Ok(EvalCorpus::load(path)?)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::config(anyhow!("creating {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, text + "\n").map_err(|e| Failure::config(anyhow!("writing {}: {e}", path.display())))
}

fn finish_writer(mut w: BufWriter<File>, path: &Path) -> Result<(), Failure> {
    w.flush().map_err(|e| Failure::config(anyhow!("writing {}: {e}", path.display())))
}

/// Token ids from a JSON array or `{"ids": [...]}`; raw text only with the
/// explicit vocabulary-encoding opt-in.
fn read_prompt(path: &Path, model: &Model, vocab_detok_only: bool) -> Result<Vec<u32>, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::config(anyhow!("reading prompt {}: {e}", path.display())))?;
    #[derive(serde::Deserialize)]
    #[serde(untagged)]
    enum PromptJson {
        Ids(Vec<u32>),
        Object { ids: Vec<u32> },
    }
    match serde_json::from_str::<PromptJson>(&text) {
        Ok(PromptJson::Ids(ids)) | Ok(PromptJson::Object { ids }) => Ok(ids),
        Err(_) if vocab_detok_only => Ok(model.encode_with_vocab(&text)?),
        Err(e) => Err(Failure::config(anyhow!(
            "prompt {} is not a token-id JSON array ({e}); pass --vocab-detok-only to encode raw text",
            path.display()
        ))),
    }
}

/// Merges defaults, the optional config file and flags, in rising
/// precedence. Returns the config and the seed actually used.
pub fn resolve_generation(flags: &GenFlags, seed: Option<u64>) -> Result<(GenerationConfig, u64), Failure> {
    let mut cfg = match &flags.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::config(anyhow!("reading config {}: {e}", p.display())))?;
            serde_json::from_str::<GenerationConfig>(&text)
                .map_err(|e| Failure::config(anyhow!("parsing config {}: {e}", p.display())))?
        }
        None => GenerationConfig::default(),
    };
    if let Some(v) = flags.alpha {
        cfg.alpha = v;
    }
    if let Some(v) = flags.beta {
        cfg.beta = v;
    }
    if let Some(v) = flags.gamma {
        cfg.gamma = v;
    }
    if let Some(v) = flags.tau_stability {
        cfg.tau_stability = v;
    }
    if let Some(s) = &flags.strategy {
        cfg.strategy = s.parse()?;
    }
    if let Some(v) = flags.max_new_tokens {
        cfg.max_new_tokens = v;
    }
    if let Some(p) = &flags.store_path {
        cfg.store_path = Some(p.clone());
    }
    if let Some(v) = flags.reference_layer {
        cfg.reference_layer = Some(v);
    }
    let file_seed = match cfg.sampling {
        Sampling::TopK { seed, .. } => Some(seed),
        Sampling::Greedy => None,
    };
    let seed = seed.or(file_seed).unwrap_or(0);
    let requested = flags.sampling.as_deref().or(flags.top_k.map(|_| "top_k"));
    match requested {
        Some("greedy") => cfg.sampling = Sampling::Greedy,
        Some("top_k") => {
            let k = match (flags.top_k, cfg.sampling) {
                (Some(k), _) | (None, Sampling::TopK { k, .. }) => k,
                (None, Sampling::Greedy) => 40,
            };
            cfg.sampling = Sampling::TopK { k, seed };
        }
        Some(other) => {
            return Err(Failure::config(anyhow!("unknown sampling {other:?} (expected greedy or top_k)")));
        }
        None => {}
    }
    if let Sampling::TopK { k, .. } = cfg.sampling {
        cfg.sampling = Sampling::TopK { k, seed };
    }
    cfg.validate()?;
    Ok((cfg, seed))
}

pub fn run(a: &RunArgs, m: &mut RunManifest) -> Result<(), Failure> {
    let (cfg, seed) = resolve_generation(&a.gen, a.seed)?;
    m.config(&cfg);
    m.seed = Some(seed);
    let model = load_model(&a.model, m)?;
    m.input("prompt", &a.prompt);
    let prompt = read_prompt(&a.prompt, &model, a.vocab_detok_only)?;
    let store = match &cfg.store_path {
        Some(p) => {
            m.input("store", p);
            if !p.exists() {
                return Err(Failure {
                    code: 4,
                    err: anyhow!("group store {} does not exist (check --store)", p.display()),
                });
            }
            Some(load_store(p)?)
        }
        None => None,
    };
    let report = generate(&model, &prompt, &cfg, store.as_ref())?;
    let report_path = m.output(a.out.join("report.json"));
    write_json(&report_path, &report)?;
    let text_path = m.output(a.out.join("generated.txt"));
    std::fs::write(&text_path, &report.text)
        .map_err(|e| Failure::config(anyhow!("writing {}: {e}", text_path.display())))?;
    println!("{}", report.text);
    println!("report: {}", report_path.display());
    Ok(())
}

#[derive(Serialize)]
struct AnalyzeConfig {
    alpha: f64,
    beta: f64,
    reference_layer: usize,
    prefix_lengths: Vec<usize>,
}

pub fn analyze(a: &AnalyzeArgs, m: &mut RunManifest) -> Result<(), Failure> {
    let model = load_model(&a.model, m)?;
    let corpus = load_corpus(&a.corpus, m)?;
    let (n_layers, n_neurons) = (model.n_layers(), model.n_neurons());
    let reference_layer = a.reference_layer.unwrap_or_else(|| default_reference_layer(n_layers));
    if reference_layer >= n_layers {
        return Err(Failure::config(anyhow!("reference layer {reference_layer} >= {n_layers} layers")));
    }
    if a.prefix_lengths.contains(&0) {
        return Err(Failure::config(anyhow!("prefix lengths must be positive")));
    }
    m.config(&AnalyzeConfig {
        alpha: a.alpha,
        beta: a.beta,
        reference_layer,
        prefix_lengths: a.prefix_lengths.clone(),
    });

    let summary_path = m.output(a.out.join("stability_curves.csv"));
    let mut summary = csv::Writer::from_writer(create(&summary_path)?);
    summary
        .write_record(["seq", "prefix_len", "similarity"])
        .map_err(Error::from)?;
    for (i, seq) in corpus.sequences.iter().enumerate() {
        let out = model.forward_prefill(seq, true)?;
        let mut per_layer: Vec<Vec<TokenCoreSet>> = vec![Vec::with_capacity(seq.len()); n_layers];
        for r in out.records.expect("recording requested") {
            per_layer[r.layer].push(token_core_set(r.layer, r.token_pos, &r.values, a.alpha)?);
        }
        let dir = a.out.join(format!("seq_{i:04}"));
        std::fs::create_dir_all(&dir).map_err(|e| Failure::config(anyhow!("creating {}: {e}", dir.display())))?;

        let freq = per_layer
            .iter()
            .enumerate()
            .map(|(l, sets)| frequency_counts(l, n_neurons, sets))
            .collect::<coreinfer::Result<Vec<_>>>()?;
        let freq_path = m.output(dir.join("frequency.csv"));
        coreinfer::core_neuron::write_frequency_csv(create(&freq_path)?, &freq)?;

        let full = sentence_sets_from_tokens(&per_layer, n_neurons, seq.len(), a.alpha, a.beta)?;
        let sets_path = m.output(dir.join("core_sets.csv"));
        coreinfer::core_neuron::write_core_sets_csv(create(&sets_path)?, &full)?;

        let mut lengths: Vec<usize> = a.prefix_lengths.iter().map(|&p| p.min(seq.len())).collect();
        lengths.sort_unstable();
        lengths.dedup();
        let curve_path = m.output(dir.join("stability_curve.csv"));
        let mut curve = csv::Writer::from_writer(create(&curve_path)?);
        curve.write_record(["prefix_len", "layer", "similarity"]).map_err(Error::from)?;
        for &p in &lengths {
            let prefix = sentence_sets_from_tokens(&per_layer, n_neurons, p, a.alpha, a.beta)?;
            for (l, (ps, fs)) in prefix.iter().zip(&full).enumerate() {
                let sim = core_similarity(&ps.neurons, &fs.neurons);
                curve
                    .write_record([p.to_string(), l.to_string(), sim.to_string()])
                    .map_err(Error::from)?;
                if l == reference_layer {
                    summary
                        .write_record([i.to_string(), p.to_string(), sim.to_string()])
                        .map_err(Error::from)?;
                }
            }
        }
        curve.flush().map_err(|e| Failure::config(anyhow!("writing {}: {e}", curve_path.display())))?;
    }
    summary
        .flush()
        .map_err(|e| Failure::config(anyhow!("writing {}: {e}", summary_path.display())))?;
    println!("analyzed {} sequences into {}", corpus.sequences.len(), a.out.display());
    Ok(())
}

pub fn cluster(a: &ClusterArgs, m: &mut RunManifest) -> Result<(), Failure> {
    let model = load_model(&a.model, m)?;
    let corpus = load_corpus(&a.corpus, m)?;
    let (n_layers, n_neurons) = (model.n_layers(), model.n_neurons());
    let reference_layer = a.reference_layer.unwrap_or_else(|| default_reference_layer(n_layers));
    let opts = GroupStoreOptions {
        alpha: a.alpha,
        gamma: a.gamma,
        reference_layer: Some(reference_layer),
        k: a.k,
        k_max: a.k_max,
        seed: a.seed,
        ..Default::default()
    };
    m.config(&opts);
    m.seed = Some(a.seed);
    let labels = if a.ignore_labels || a.k.is_some() {
        None
    } else {
        corpus.topics.as_deref()
    };
    let profiles = corpus
        .sequences
        .iter()
        .map(|seq| {
            let out = model.forward_prefill(seq, true)?;
            let records = out.records.expect("recording requested");
            SentenceProfile::from_records(&records, n_layers, n_neurons, reference_layer, a.alpha)
        })
        .collect::<coreinfer::Result<Vec<_>>>()?;
    let store = build_group_store(&profiles, labels, &opts)?;

    let store_path = m.output(a.out.join("groups.cinfstore"));
    save_store(&store, &store_path)?;

    let wcss_path = m.output(a.out.join("wcss.csv"));
    let mut w = csv::Writer::from_writer(create(&wcss_path)?);
    w.write_record(["k", "wcss"]).map_err(Error::from)?;
    for (k, v) in &store.wcss_curve {
        w.write_record([k.to_string(), v.to_string()]).map_err(Error::from)?;
    }
    w.flush().map_err(|e| Failure::config(anyhow!("writing {}: {e}", wcss_path.display())))?;

    let assign_path = m.output(a.out.join("assignments.csv"));
    let mut w = csv::Writer::from_writer(create(&assign_path)?);
    w.write_record(["seq", "group", "label"]).map_err(Error::from)?;
    for (i, p) in profiles.iter().enumerate() {
        let g = assign_group(&store, &p.reference_mean)?;
        w.write_record([i.to_string(), g.to_string(), store.labels[g].clone()])
            .map_err(Error::from)?;
    }
    w.flush().map_err(|e| Failure::config(anyhow!("writing {}: {e}", assign_path.display())))?;
    println!("{} groups written to {}", store.k_groups(), store_path.display());
    Ok(())
}

#[derive(Serialize)]
struct PplReport {
    mode: PerplexityMode,
    result: coreinfer::evalbench::PerplexityResult,
}

#[derive(Serialize)]
struct SweepConfig<'a> {
    alphas: &'a [f64],
    betas: &'a [f64],
}

#[derive(Serialize)]
struct SpearmanConfig {
    alpha: f64,
    beta: f64,
    reference_layer: Option<usize>,
}

pub fn eval(a: &EvalArgs, m: &mut RunManifest) -> Result<(), Failure> {
    match &a.kind {
        EvalKind::Ppl(p) => {
            let model = load_model(&p.common.model, m)?;
            let corpus = load_corpus(&p.common.corpus, m)?;
            let mode = match p.mode {
                PplMode::Dense => PerplexityMode::Dense,
                PplMode::Plan => PerplexityMode::Plan {
                    alpha: p.alpha,
                    beta: p.beta,
                },
            };
            m.config(&mode);
            let result = perplexity(&model, &corpus, mode)?;
            println!("ppl {} over {} tokens", result.ppl, result.tokens_scored);
            let path = m.output(p.common.out.join("ppl.json"));
            write_json(&path, &PplReport { mode, result })
        }
        EvalKind::Sweep(s) => {
            let model = load_model(&s.common.model, m)?;
            let corpus = load_corpus(&s.common.corpus, m)?;
            m.config(&SweepConfig {
                alphas: &s.alphas,
                betas: &s.betas,
            });
            let result = sweep(&model, &corpus, &s.alphas, &s.betas)?;
            let path = m.output(s.common.out.join("sweep.csv"));
            let w = create(&path)?;
            result.write_csv(w)?;
            println!("{} cells written to {}", result.cells.len(), path.display());
            Ok(())
        }
        EvalKind::Spearman(s) => {
            let model = load_model(&s.common.model, m)?;
            let corpus = load_corpus(&s.common.corpus, m)?;
            m.config(&SpearmanConfig {
                alpha: s.alpha,
                beta: s.beta,
                reference_layer: s.reference_layer,
            });
            let result = spearman_core_vs_semantic(&model, &corpus, s.alpha, s.beta, s.reference_layer)?;
            println!("spearman rho {} (p = {}, n = {})", result.rho, result.p_value, result.n_pairs);
            let path = m.output(s.common.out.join("spearman.json"));
            write_json(&path, &result)
        }
    }
}

pub fn bench(a: &BenchArgs, m: &mut RunManifest) -> Result<(), Failure> {
    let model = load_model(&a.model, m)?;
    let prompt = match &a.prompt {
        Some(p) => {
            m.input("prompt", p);
            read_prompt(p, &model, false)?
        }
        None => random_prompts(1, a.prompt_len..=a.prompt_len, model.config().vocab_size, a.seed).remove(0),
    };
    let opts = BenchOptions {
        new_tokens: a.new_tokens,
        warmup: a.warmup,
        runs: a.runs,
    };
    let mut arms = vec![BenchArm::dense()];
    arms.extend(a.betas.iter().map(|&b| BenchArm::stability(a.alpha, b)));
    m.config(&serde_json::json!({ "options": opts, "arms": arms }));
    m.seed = Some(a.seed);
    let rows = bench_decode(&model, &prompt, &arms, &opts)?;
    let csv_path = m.output(a.out.join("bench.csv"));
    let w = create(&csv_path)?;
    write_bench_csv(w, &rows)?;
    let json_path = m.output(a.out.join("bench.json"));
    write_json(&json_path, &rows)?;
    println!("{:<24} {:>10} {:>12} {:>12} {:>10}", "arm", "flop_ratio", "tokens/s", "ffn_ms/step", "ffn_share");
    for r in &rows {
        println!(
            "{:<24} {:>10.4} {:>12.1} {:>12.3} {:>10.3}",
            r.label, r.flop_ratio, r.tokens_per_s, r.ffn_ms_per_step, r.ffn_share
        );
    }
    Ok(())
}

pub fn synth(a: &SynthArgs, m: &mut RunManifest) -> Result<(), Failure> {
    let spec = match a.preset {
        Preset::Tiny => SyntheticSpec::tiny(),
        Preset::TinyGated => SyntheticSpec::tiny_gated(),
        Preset::Bench => SyntheticSpec::bench(),
    };
    if a.min_len == 0 || a.min_len > a.max_len {
        return Err(Failure::config(anyhow!("need 1 <= --min-len <= --max-len")));
    }
    if a.pairs > 0 && a.topics < 2 {
        return Err(Failure::config(anyhow!("--pairs needs --topics >= 2")));
    }
    if a.topics > spec.vocab_size {
        return Err(Failure::config(anyhow!("--topics exceeds the vocabulary size")));
    }
    m.config(&spec);
    m.seed = Some(a.seed);
    let model = synthetic_model(&spec, a.seed)?;
    model.save(&a.out)?;
    for f in [coreinfer::model::CONFIG_FILE, coreinfer::model::WEIGHTS_FILE, coreinfer::model::VOCAB_FILE] {
        m.output(a.out.join(f));
    }
    let lens = a.min_len..=a.max_len;
    if a.sequences > 0 {
        let corpus = if a.topics > 0 {
            let (sequences, topics) = topic_prompts(a.sequences, a.topics, lens.clone(), spec.vocab_size, a.seed + 1);
            EvalCorpus {
                name: "corpus".into(),
                sequences,
                topics: Some(topics),
                pairs: Vec::new(),
            }
        } else {
            EvalCorpus {
                name: "corpus".into(),
                sequences: random_prompts(a.sequences, lens.clone(), spec.vocab_size, a.seed + 1),
                ..Default::default()
            }
        };
        let path = m.output(a.out.join("corpus.jsonl"));
        let mut w = create(&path)?;
        corpus.write_jsonl(&mut w)?;
        finish_writer(w, &path)?;
    }
    if a.pairs > 0 {
        let corpus = EvalCorpus {
            name: "pairs".into(),
            pairs: topic_pairs(a.pairs, a.topics, lens, spec.vocab_size, a.seed + 2)
                .into_iter()
                .map(|(a, b, score)| LabeledPair { a, b, score })
                .collect(),
            ..Default::default()
        };
        let path = m.output(a.out.join("pairs.jsonl"));
        let mut w = create(&path)?;
        corpus.write_jsonl(&mut w)?;
        finish_writer(w, &path)?;
    }
    println!("model written to {}", a.out.display());
    Ok(())
}

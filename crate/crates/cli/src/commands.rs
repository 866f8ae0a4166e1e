//! Command implementations. Each returns its result so tests can drive
//! them without spawning the binary.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use serde_json::json;

use ctxqa_core::data::{
    build_vocab, parse_squad_json, prepare_examples, tokenize_examples, write_skip_report, SquadExample,
    TokenizedExample,
};
use ctxqa_core::embedder::{load_pretrained_embeddings, Vocabulary};
use ctxqa_core::eval::{evaluate, EvalResult};
use ctxqa_core::gradsuite::{run_suite, CaseResult};
use ctxqa_core::lm::toy::{read_corpus, ToyLm, ToyLmConfig};
use ctxqa_core::lm::{load_lm_states, write_lm_states_file, LmDims, LmLayer, LmStore, SeqKind};
use ctxqa_core::model::{ModelInput, QaModel};
use ctxqa_core::reembed::{export_gate_csv, frequency_gate_correlation, record_gate_stats, GateStats};
use ctxqa_core::synth::{synthetic_squad, synthetic_vector, write_synthetic_embeddings};
use ctxqa_core::tensor::{read_checkpoint, write_checkpoint};
use ctxqa_core::train::{train, EvalSet, LogEntry, TrainItem, TrainSummary};
use ctxqa_core::{Error, Graph, Mode, ParamStore, Tensor};

use crate::config::{echo, RunConfig};

const WORD_TABLE: &str = "embed.words";
/// Seed of the vectors used when `synthetic_embeddings` is set.
pub const SYNTHETIC_VECTOR_SEED: u64 = 0;

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Word vectors for every vocabulary entry; PAD and UNK stay zero.
pub fn synthetic_table(vocab: &Vocabulary, dim: usize) -> Tensor {
    let mut table = Tensor::zeros(&[vocab.len(), dim]);
    for (id, token) in vocab.tokens() {
        if id < Vocabulary::RESERVED {
            continue;
        }
        for (k, v) in synthetic_vector(token, dim, SYNTHETIC_VECTOR_SEED).into_iter().enumerate() {
            table.data[id * dim + k] = v as f64;
        }
    }
    table
}

/// Fails when the variant needs LM states and none are configured.
fn check_lm_config(cfg: &RunConfig, lm_states: Option<&Path>) -> anyhow::Result<Option<LmLayer>> {
    let layer = cfg.variant()?.and_then(|v| v.lm_layer());
    if let Some(layer) = layer {
        match lm_states {
            None => bail!(Error::Config(format!(
                "variant {} needs precomputed LM states (--lm-states)",
                cfg.variant
            ))),
            Some(p) if !p.exists() => bail!(Error::Config(format!("LM state file {} does not exist", p.display()))),
            Some(_) => log::info!("using LM layer {}", layer.as_str()),
        }
    }
    Ok(layer)
}

fn load_lm(layer: Option<LmLayer>, path: Option<&Path>) -> anyhow::Result<Option<(LmStore, LmLayer)>> {
    match (layer, path) {
        (Some(layer), Some(p)) => {
            let store = load_lm_states(p)?;
            if store.dims().is_none() {
                bail!(Error::Config(format!("LM state file {} is empty", p.display())));
            }
            Ok(Some((store, layer)))
        }
        _ => Ok(None),
    }
}

fn lm_dim(lm: &Option<(LmStore, LmLayer)>) -> usize {
    match lm {
        Some((store, layer)) => store.dims().map_or(0, |d| d.get(*layer)),
        None => 0,
    }
}

fn usable(ex: &TokenizedExample) -> bool {
    !ex.passage.is_empty() && !ex.question.is_empty()
}

fn eval_set(
    raw: Vec<SquadExample>,
    examples: Vec<TokenizedExample>,
    vocab: &Vocabulary,
    lm: &Option<(LmStore, LmLayer)>,
) -> anyhow::Result<EvalSet> {
    let examples: Vec<_> = examples.into_iter().filter(usable).collect();
    let inputs = examples
        .iter()
        .map(|ex| ModelInput::from_example(ex, vocab, lm.as_ref().map(|(s, l)| (s, *l))))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalSet {
        inputs,
        examples,
        golds: raw,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub vocab_size: usize,
    pub vocab_fingerprint: u64,
    pub lm_dims: Option<LmDims>,
    pub step: usize,
    pub em: Option<f64>,
    pub f1: Option<f64>,
}

/// Writes `model.ckpt`, `vocab.tsv` and `run.json` into `dir`.
pub fn save_checkpoint(dir: &Path, store: &ParamStore, vocab: &Vocabulary, meta: &CheckpointMeta) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut w = create(&dir.join("model.ckpt"))?;
    write_checkpoint(store, &mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("vocab.tsv"))?;
    vocab.write_tsv(&mut w)?;
    w.flush()?;
    write_json(&dir.join("run.json"), meta)
}

pub struct LoadedModel {
    pub meta: CheckpointMeta,
    pub vocab: Vocabulary,
    pub model: QaModel,
    pub store: ParamStore,
}

pub fn load_checkpoint(dir: &Path) -> anyhow::Result<LoadedModel> {
    let meta_path = dir.join("run.json");
    let text = std::fs::read_to_string(&meta_path).with_context(|| format!("reading {}", meta_path.display()))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).with_context(|| format!("parsing {}", meta_path.display()))?;
    let vocab = Vocabulary::read_tsv(dir.join("vocab.tsv"))?;
    if vocab.len() != meta.vocab_size || vocab.fingerprint() != meta.vocab_fingerprint {
        bail!(Error::Version(format!(
            "vocabulary in {} does not match the checkpoint ({} types, expected {})",
            dir.display(),
            vocab.len(),
            meta.vocab_size
        )));
    }
    let ckpt_path = dir.join("model.ckpt");
    let f = File::open(&ckpt_path).with_context(|| format!("opening {}", ckpt_path.display()))?;
    let saved = read_checkpoint(BufReader::new(f))?;
    let table = saved
        .id(WORD_TABLE)
        .map(|id| saved.get(id).clone())
        .ok_or_else(|| Error::Version(format!("checkpoint has no {WORD_TABLE}")))?;
    if table.shape[0] != vocab.len() {
        bail!(Error::Version(format!(
            "checkpoint word table has {} rows but the vocabulary has {} types",
            table.shape[0],
            vocab.len()
        )));
    }
    let lm_dim = match (meta.config.variant()?.and_then(|v| v.lm_layer()), meta.lm_dims) {
        (Some(layer), Some(dims)) => dims.get(layer),
        _ => 0,
    };
    let mut store = ParamStore::new();
    let model = QaModel::new(&mut store, meta.config.model_config(lm_dim)?, table, meta.config.seed)?;
    store.load_from(&saved)?;
    Ok(LoadedModel {
        meta,
        vocab,
        model,
        store,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainOutcome {
    pub summary: TrainSummary,
    pub examples: usize,
    pub skipped: usize,
    pub vocab_size: usize,
    pub first_loss: Option<f64>,
    pub best_dir: PathBuf,
    pub final_dir: PathBuf,
}

/// Trains per `cfg`. Writes `train_log.jsonl` (config line, then one line
/// per step), `best/` (best dev F1), `final/` and `summary.json` under
/// `out_dir`.
pub fn cmd_train(cfg: &RunConfig) -> anyhow::Result<TrainOutcome> {
    let layer = check_lm_config(cfg, cfg.lm_states.as_deref())?;
    let train_file = cfg
        .train_file
        .as_deref()
        .ok_or_else(|| Error::Config("train_file is not set".into()))?;
    if cfg.embeddings.is_none() && !cfg.synthetic_embeddings {
        bail!(Error::Config("set embeddings or synthetic_embeddings".into()));
    }
    let out = cfg.out_dir.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;

    let raw = parse_squad_json(train_file)?;
    let (examples, skipped) = prepare_examples(&raw);
    write_skip_report(out.join("skipped.jsonl"), &skipped)?;
    if !skipped.is_empty() {
        log::warn!("skipped {} of {} training examples", skipped.len(), raw.len());
    }
    if examples.is_empty() {
        bail!(Error::Config(format!("no usable training examples in {}", train_file.display())));
    }
    let (dev_raw, dev_examples) = match &cfg.dev_file {
        Some(p) => {
            let r = parse_squad_json(p)?;
            let t = tokenize_examples(&r);
            (r, t)
        }
        None => (raw.clone(), tokenize_examples(&raw)),
    };
    // Word vectors are frozen, so dev types can share the table.
    let all: Vec<TokenizedExample> = examples.iter().chain(&dev_examples).cloned().collect();
    let vocab = build_vocab(&all, cfg.min_count);
    let table = match &cfg.embeddings {
        Some(path) => {
            let (table, report) = load_pretrained_embeddings(path, &vocab, cfg.word_dim)?;
            log::info!("embeddings: {} types, {} without a vector", vocab.len(), report.misses);
            table
        }
        None => synthetic_table(&vocab, cfg.word_dim),
    };
    let lm = load_lm(layer, cfg.lm_states.as_deref())?;
    let lm_dims = lm.as_ref().and_then(|(s, _)| s.dims());

    let mut store = ParamStore::new();
    let model = QaModel::new(&mut store, cfg.model_config(lm_dim(&lm))?, table, cfg.seed)?;
    let items = examples
        .iter()
        .filter(|ex| usable(ex))
        .map(|ex| {
            Ok(TrainItem {
                input: ModelInput::from_example(ex, &vocab, lm.as_ref().map(|(s, l)| (s, *l)))?,
                gold: ex.gold_spans[0],
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let dev = eval_set(dev_raw, dev_examples, &vocab, &lm)?;

    let mut log_file = create(&out.join("train_log.jsonl"))?;
    writeln!(log_file, "{}", json!({ "config": cfg.to_json() }))?;
    let mut log_err: Option<std::io::Error> = None;
    let mut first_loss = None;
    let best_dir = out.join("best");
    let meta_for = |step: usize, em: Option<f64>, f1: Option<f64>| CheckpointMeta {
        config: cfg.clone(),
        vocab_size: vocab.len(),
        vocab_fingerprint: vocab.fingerprint(),
        lm_dims,
        step,
        em,
        f1,
    };
    let last_step = std::cell::Cell::new(0);
    let summary = train(
        &model,
        &mut store,
        &items,
        Some(&dev),
        &cfg.train_options(),
        |entry: &LogEntry| {
            first_loss.get_or_insert(entry.loss);
            last_step.set(entry.step);
            if let Some(em) = entry.em {
                log::info!("step {} loss {:.4} em {em:.1} f1 {:.1}", entry.step, entry.loss, entry.f1.unwrap_or(0.0));
            }
            let line = serde_json::to_string(entry).expect("log entry serializes");
            if let Err(e) = writeln!(log_file, "{line}") {
                log_err.get_or_insert(e);
            }
        },
        |store, result| {
            save_checkpoint(&best_dir, store, &vocab, &meta_for(last_step.get(), Some(result.em), Some(result.f1)))
                .map_err(|e| Error::Config(format!("saving best checkpoint: {e:#}")))
        },
    )?;
    if let Some(e) = log_err {
        return Err(e).context("writing training log");
    }
    log_file.flush()?;
    let final_dir = out.join("final");
    save_checkpoint(&final_dir, &store, &vocab, &meta_for(summary.steps, None, None))?;
    let outcome = TrainOutcome {
        summary,
        examples: items.len(),
        skipped: skipped.len(),
        vocab_size: vocab.len(),
        first_loss,
        best_dir,
        final_dir,
    };
    write_json(&out.join("summary.json"), &json!({ "config": cfg.to_json(), "outcome": outcome }))?;
    Ok(outcome)
}

/// Effective LM file for a loaded model: the override, else the one it
/// was trained with.
fn lm_for(loaded: &LoadedModel, lm_states: Option<&Path>) -> anyhow::Result<Option<(LmStore, LmLayer)>> {
    let path = lm_states.or(loaded.meta.config.lm_states.as_deref());
    let layer = check_lm_config(&loaded.meta.config, path)?;
    let lm = load_lm(layer, path)?;
    if let (Some((store, layer)), Some(dims)) = (&lm, loaded.meta.lm_dims) {
        if store.dims().map(|d| d.get(*layer)) != Some(dims.get(*layer)) {
            bail!(Error::Version("LM state width differs from the one the model was trained with".into()));
        }
    }
    Ok(lm)
}

/// Predicted answer per question id; unusable examples get "".
pub fn cmd_predict(checkpoint: &Path, data: &Path, lm_states: Option<&Path>) -> anyhow::Result<BTreeMap<String, String>> {
    let loaded = load_checkpoint(checkpoint)?;
    let lm = lm_for(&loaded, lm_states)?;
    let raw = parse_squad_json(data)?;
    let examples = tokenize_examples(&raw);
    let mut out = BTreeMap::new();
    for ex in &examples {
        let answer = if usable(ex) {
            let input = ModelInput::from_example(ex, &loaded.vocab, lm.as_ref().map(|(s, l)| (s, *l)))?;
            let (l, r) = loaded.model.predict(&loaded.store, &input)?;
            ex.span_text(l, r)
        } else {
            log::warn!("question {} has an empty passage or question", ex.id);
            String::new()
        };
        out.insert(ex.id.clone(), answer);
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, preds: &BTreeMap<String, String>) -> anyhow::Result<()> {
    write_json(path, preds)
}

/// Writes predictions, then scores them and writes the report.
pub fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    lm_states: Option<&Path>,
    predictions_out: &Path,
    report_out: &Path,
) -> anyhow::Result<EvalResult> {
    let preds = cmd_predict(checkpoint, data, lm_states)?;
    write_predictions(predictions_out, &preds)?;
    let preds: HashMap<String, String> = ctxqa_core::eval::read_predictions(predictions_out)?;
    let golds = parse_squad_json(data)?;
    let result = evaluate(&golds, &preds);
    let meta = load_checkpoint_meta(checkpoint)?;
    let report = json!({
        "em": result.em,
        "f1": result.f1,
        "total": result.total,
        "missing": result.missing,
        "data": data.display().to_string(),
        "checkpoint": checkpoint.display().to_string(),
        "config": meta.config.to_json(),
        "per_question": result.per_question,
    });
    write_json(report_out, &report)?;
    Ok(result)
}

fn load_checkpoint_meta(dir: &Path) -> anyhow::Result<CheckpointMeta> {
    let p = dir.join("run.json");
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct GateReport {
    pub rows: usize,
    pub occurrences: u64,
    pub correlation: Option<f64>,
}

/// Mean gate per word type over every question and passage in `data`.
pub fn cmd_gates(
    checkpoint: &Path,
    data: &Path,
    lm_states: Option<&Path>,
    out_csv: &Path,
    split: &str,
) -> anyhow::Result<GateReport> {
    let loaded = load_checkpoint(checkpoint)?;
    if loaded.model.reembedder.is_none() {
        bail!(Error::Config("the checkpoint has no re-embedding gates".into()));
    }
    let lm = lm_for(&loaded, lm_states)?;
    let raw = parse_squad_json(data)?;
    let mut stats = GateStats::new();
    for ex in tokenize_examples(&raw).iter().filter(|ex| usable(ex)) {
        let input = ModelInput::from_example(ex, &loaded.vocab, lm.as_ref().map(|(s, l)| (s, *l)))?;
        let mut g = Graph::with_mode(&loaded.store, Mode::Eval, 0);
        let out = loaded.model.forward(&mut g, &input)?;
        for (gates, seq) in [(out.question_gates, &input.question), (out.passage_gates, &input.passage)] {
            let gates = gates.expect("gated model yields gates");
            record_gate_stats(&g.tensor(gates), &seq.ids, &mut stats)?;
        }
    }
    let config = serde_json::to_string(&loaded.meta.config.to_json())?;
    let mut w = create(out_csv)?;
    export_gate_csv(&stats, &loaded.vocab, split, &config, &mut w)?;
    w.flush()?;
    let occurrences = stats.iter().map(|(id, _)| stats.occurrences(id)).sum();
    Ok(GateReport {
        rows: stats.len(),
        occurrences,
        correlation: frequency_gate_correlation(&stats, &loaded.vocab),
    })
}

/// Runs the finite-difference suite over `seeds` random instances per case.
pub fn cmd_gradcheck(seeds: usize) -> anyhow::Result<Vec<CaseResult>> {
    let seeds: Vec<u64> = (1..=seeds as u64).collect();
    Ok(run_suite(&seeds)?)
}

pub enum LmSource<'a> {
    /// Train a toy LM on this corpus (one sentence per line).
    Corpus(&'a Path, ToyLmConfig),
    /// Load a toy LM saved with `save_lm`.
    Saved(&'a Path),
}

#[derive(Debug, Clone, Serialize)]
pub struct PrecomputeReport {
    pub records: usize,
    pub dims: LmDims,
    pub epoch_losses: Vec<f64>,
}

/// Writes LM states for every question and passage in `data`, then reloads
/// the file and checks every sequence joins with the reader's tokenization.
pub fn cmd_precompute_lm(
    source: LmSource<'_>,
    data: &[PathBuf],
    out: &Path,
    save_lm: Option<&Path>,
) -> anyhow::Result<PrecomputeReport> {
    let (lm, epoch_losses) = match source {
        LmSource::Corpus(path, config) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ToyLm::train(&read_corpus(&text), config)?
        }
        LmSource::Saved(dir) => (ToyLm::load(dir)?, Vec::new()),
    };
    if let Some(dir) = save_lm {
        lm.save(dir)?;
    }
    let mut examples = Vec::new();
    for p in data {
        examples.extend(tokenize_examples(&parse_squad_json(p)?));
    }
    let records = lm.precompute(&examples)?;
    write_lm_states_file(out, lm.dims(), &records)?;
    let store = load_lm_states(out)?;
    for ex in &examples {
        for (kind, n) in [(SeqKind::Question, ex.question.len()), (SeqKind::Passage, ex.passage.len())] {
            for layer in LmLayer::ALL {
                store.join(&ex.id, kind, n, layer)?;
            }
        }
    }
    Ok(PrecomputeReport {
        records: records.len(),
        dims: lm.dims(),
        epoch_losses,
    })
}

/// Synthetic vectors for every (lowercased) type in `data`.
pub fn cmd_make_embeddings(data: &[PathBuf], dim: usize, seed: u64, out: &Path) -> anyhow::Result<usize> {
    let mut examples = Vec::new();
    for p in data {
        examples.extend(tokenize_examples(&parse_squad_json(p)?));
    }
    let vocab = build_vocab(&examples, 1);
    let words = vocab.tokens().filter(|(id, _)| *id >= Vocabulary::RESERVED).map(|(_, t)| t);
    let mut w = create(out)?;
    Ok(write_synthetic_embeddings(words, dim, seed, &mut w)?)
}

pub fn cmd_synth_squad(n: usize, seed: u64, out: &Path) -> anyhow::Result<()> {
    write_json(out, &synthetic_squad(n, seed))
}

#[derive(Debug, Clone, Serialize)]
pub struct TrendRow {
    pub seed: u64,
    pub tr_f1: f64,
    pub tr_mlp_f1: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrendReport {
    pub rows: Vec<TrendRow>,
    /// Mean of `tr_f1 - tr_mlp_f1`.
    pub mean_difference: f64,
    pub tr_ahead: bool,
}

/// Trains TR and TR(MLP) under `base` for each seed and compares best dev F1.
pub fn cmd_trend(base: &RunConfig, seeds: &[u64]) -> anyhow::Result<TrendReport> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut f1 = Vec::new();
        for variant in ["tr", "tr-mlp"] {
            let cfg = RunConfig {
                variant: variant.into(),
                seed,
                out_dir: base.out_dir.join(format!("{variant}-seed{seed}")),
                ..base.clone()
            };
            let outcome = cmd_train(&cfg)?;
            f1.push(outcome.summary.best_f1.unwrap_or(0.0));
        }
        log::info!("seed {seed}: tr {:.1} tr-mlp {:.1}", f1[0], f1[1]);
        rows.push(TrendRow {
            seed,
            tr_f1: f1[0],
            tr_mlp_f1: f1[1],
        });
    }
    let mean_difference = rows.iter().map(|r| r.tr_f1 - r.tr_mlp_f1).sum::<f64>() / rows.len().max(1) as f64;
    let report = TrendReport {
        rows,
        mean_difference,
        tr_ahead: mean_difference >= 0.0,
    };
    write_json(
        &base.out_dir.join("trend.json"),
        &json!({ "config": echo(base, &[("seeds", json!(seeds))]), "report": report }),
    )?;
    Ok(report)
}

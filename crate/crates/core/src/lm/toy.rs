//! Small forward language model (char CNN -> LSTM -> projection -> LSTM ->
//! projection -> next-word softmax) used to produce LM-state fixtures with
//! the same three-layer structure as a large pre-trained LM.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LmDims, LmRecord, SeqKind};
use crate::data::{tokenize, TokenizedExample};
use crate::embedder::{CharCnn, CharCnnConfig, Vocabulary};
use crate::encoders::{Dense, LstmCell};
use crate::error::{Error, Result};
use crate::tensor::{adam_step, read_checkpoint, write_checkpoint, AdamConfig, AdamState, Gradients, Graph, ParamStore, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyLmConfig {
    pub char_cnn: CharCnnConfig,
    pub hidden: usize,
    pub l1_dim: usize,
    pub l2_dim: usize,
    pub min_count: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        ToyLmConfig {
            char_cnn: CharCnnConfig {
                char_dim: 8,
                widths: vec![1, 2, 3],
                filters_per_width: 8,
            },
            hidden: 48,
            l1_dim: 16,
            l2_dim: 16,
            min_count: 1,
            epochs: 4,
            batch_size: 8,
            lr: 5e-3,
            seed: 7,
        }
    }
}

pub struct ToyLm {
    pub config: ToyLmConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore,
    cnn: CharCnn,
    lstm1: LstmCell,
    proj1: Dense,
    lstm2: LstmCell,
    proj2: Dense,
    out: Dense,
}

/// One tokenized sentence per non-blank line.
pub fn read_corpus(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| tokenize(l).into_iter().map(|t| t.text).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect()
}

impl ToyLm {
    fn build(config: ToyLmConfig, vocab: Vocabulary) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let cnn = CharCnn::new(&mut store, "lm.char_cnn", config.char_cnn.clone(), &mut rng);
        let e = config.char_cnn.out_dim();
        let lstm1 = LstmCell::new(&mut store, "lm.lstm1", e, config.hidden, &mut rng);
        let proj1 = Dense::new(&mut store, "lm.proj1", config.hidden, config.l1_dim, &mut rng);
        let lstm2 = LstmCell::new(&mut store, "lm.lstm2", config.l1_dim, config.hidden, &mut rng);
        let proj2 = Dense::new(&mut store, "lm.proj2", config.hidden, config.l2_dim, &mut rng);
        let out = Dense::new(&mut store, "lm.out", config.l2_dim, vocab.len(), &mut rng);
        ToyLm {
            config,
            vocab,
            store,
            cnn,
            lstm1,
            proj1,
            lstm2,
            proj2,
            out,
        }
    }

    pub fn dims(&self) -> LmDims {
        LmDims {
            emb: self.config.char_cnn.out_dim(),
            l1: self.config.l1_dim,
            l2: self.config.l2_dim,
        }
    }

    fn layers(&self, g: &mut Graph, words: &[&str]) -> Result<[Var; 3]> {
        let emb = self.cnn.forward_words(g, words)?;
        let h1 = self.lstm1.run(g, emb, false)?;
        let l1 = self.proj1.forward(g, h1)?;
        let h2 = self.lstm2.run(g, l1, false)?;
        let l2 = self.proj2.forward(g, h2)?;
        Ok([emb, l1, l2])
    }

    /// Mean next-word cross-entropy over a sentence of at least two tokens.
    fn loss(&self, g: &mut Graph, words: &[&str]) -> Result<Var> {
        let [_, _, l2] = self.layers(g, &words[..words.len() - 1])?;
        let logits = self.out.forward(g, l2)?;
        let mut terms = Vec::with_capacity(words.len() - 1);
        for (t, w) in words[1..].iter().enumerate() {
            let row = g.row(logits, t)?;
            terms.push(g.cross_entropy(row, self.vocab.id(w))?);
        }
        let all = g.concat(&terms, 0)?;
        let total = g.sum(all);
        Ok(g.affine(total, 1.0 / terms.len() as f64, 0.0))
    }

    /// Trains on `sentences`; returns the model and the mean loss per epoch.
    pub fn train(sentences: &[Vec<String>], config: ToyLmConfig) -> Result<(Self, Vec<f64>)> {
        let mut vocab = Vocabulary::new();
        for s in sentences {
            for w in s {
                vocab.count(w);
            }
        }
        vocab.prune(config.min_count);
        let mut lm = ToyLm::build(config, vocab);
        let usable: Vec<Vec<&str>> = sentences
            .iter()
            .filter(|s| s.len() >= 2)
            .map(|s| s.iter().map(String::as_str).collect())
            .collect();
        if usable.is_empty() {
            return Err(Error::Config("language-model corpus has no sentence of two or more tokens".into()));
        }
        let mut adam = AdamState::new(
            &lm.store,
            AdamConfig {
                lr: lm.config.lr,
                round_to_f32: true,
                ..AdamConfig::default()
            },
        );
        let mut history = Vec::new();
        for _ in 0..lm.config.epochs {
            let mut epoch_loss = 0.0;
            for chunk in usable.chunks(lm.config.batch_size.max(1)) {
                let mut acc = Gradients::zeros(&lm.store);
                for words in chunk {
                    let mut g = Graph::new(&lm.store);
                    let loss = lm.loss(&mut g, words)?;
                    epoch_loss += g.value(loss)[0];
                    acc.accumulate(&g.backward(loss)?);
                }
                acc.scale(1.0 / chunk.len() as f64);
                adam_step(&mut lm.store, &acc, &mut adam)?;
            }
            history.push(epoch_loss / usable.len() as f64);
        }
        Ok((lm, history))
    }

    /// `(emb, L1, L2)` row-major matrices for a token sequence.
    pub fn states(&self, words: &[&str]) -> Result<[Vec<f32>; 3]> {
        let mut g = Graph::new(&self.store);
        let vars = self.layers(&mut g, words)?;
        Ok(vars.map(|v| g.value(v).iter().map(|&x| x as f32).collect()))
    }

    /// LM states for every question and passage of `examples`, tokenized
    /// exactly as the reader sees them.
    pub fn precompute(&self, examples: &[TokenizedExample]) -> Result<Vec<LmRecord>> {
        let mut out = Vec::with_capacity(2 * examples.len());
        for ex in examples {
            for (kind, toks) in [(SeqKind::Question, &ex.question), (SeqKind::Passage, &ex.passage)] {
                let words: Vec<&str> = toks.iter().map(|t| t.text.as_str()).collect();
                out.push(LmRecord {
                    example_id: ex.id.clone(),
                    kind,
                    tokens: words.len(),
                    layers: self.states(&words)?,
                });
            }
        }
        Ok(out)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let ckpt = dir.join("lm.ckpt");
        let f = File::create(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        write_checkpoint(&self.store, BufWriter::new(f)).map_err(|e| Error::io(&ckpt, e))?;
        let vpath = dir.join("lm_vocab.tsv");
        let f = File::create(&vpath).map_err(|e| Error::io(&vpath, e))?;
        self.vocab.write_tsv(BufWriter::new(f)).map_err(|e| Error::io(&vpath, e))?;
        let cpath = dir.join("lm_config.json");
        let json = serde_json::to_string_pretty(&self.config).expect("config serializes");
        std::fs::write(&cpath, json).map_err(|e| Error::io(&cpath, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cpath = dir.join("lm_config.json");
        let text = std::fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
        let config: ToyLmConfig = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: cpath.display().to_string(),
            msg: e.to_string(),
        })?;
        let vocab = Vocabulary::read_tsv(dir.join("lm_vocab.tsv"))?;
        let mut lm = ToyLm::build(config, vocab);
        let ckpt = dir.join("lm.ckpt");
        let f = File::open(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
        let stored = read_checkpoint(BufReader::new(f))?;
        lm.store.load_from(&stored)?;
        Ok(lm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CORPUS: &str = "the river bank was muddy .\nshe went to the bank to deposit money .\nthe bank raised rates .\n";

    fn small() -> ToyLmConfig {
        ToyLmConfig {
            hidden: 12,
            l1_dim: 6,
            l2_dim: 5,
            epochs: 2,
            ..ToyLmConfig::default()
        }
    }

    #[test]
    fn training_reduces_loss() {
        let sents = read_corpus(CORPUS);
        assert_eq!(sents.len(), 3);
        let (_, hist) = ToyLm::train(&sents, ToyLmConfig { epochs: 30, ..small() }).unwrap();
        assert!(hist.last().unwrap() < &hist[0], "{hist:?}");
    }

    #[test]
    fn emb_layer_is_type_constant_and_l1_is_not() {
        let (lm, _) = ToyLm::train(&read_corpus(CORPUS), small()).unwrap();
        let a = lm.states(&["the", "river", "bank"]).unwrap();
        let b = lm.states(&["money", "bank"]).unwrap();
        let d = lm.dims();
        let row = |m: &[f32], i: usize, w: usize| m[i * w..(i + 1) * w].to_vec();
        assert_eq!(row(&a[0], 2, d.emb), row(&b[0], 1, d.emb));
        assert_ne!(row(&a[1], 2, d.l1), row(&b[1], 1, d.l1));
        assert_eq!(a[2].len(), 3 * d.l2);
    }

    #[test]
    fn save_load_round_trip() {
        let (lm, _) = ToyLm::train(&read_corpus(CORPUS), small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        lm.save(dir.path()).unwrap();
        let back = ToyLm::load(dir.path()).unwrap();
        let words = ["the", "bank", "unseen"];
        // Parameters are stored as f32, so compare the f32 states.
        assert_eq!(lm.states(&words).unwrap(), back.states(&words).unwrap());
    }
}

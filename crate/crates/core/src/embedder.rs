//! Non-contextual token representation `x_t = [w_t; c_t]`: frozen
//! pre-trained word vectors next to a trainable character CNN.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::fan_in_init;
use crate::error::{Error, Result, TensorError};
use crate::tensor::{check_rate, Graph, Mode, ParamId, ParamStore, Tensor, Var};

/// Token/id map over lowercased word types with training-corpus counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    freq: Vec<u64>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const RESERVED: usize = 2;
    pub const PAD_TOKEN: &'static str = "<pad>";
    pub const UNK_TOKEN: &'static str = "<unk>";

    pub fn new() -> Self {
        let tokens = vec![Self::PAD_TOKEN.to_string(), Self::UNK_TOKEN.to_string()];
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary {
            tokens,
            index,
            freq: vec![0; Self::RESERVED],
        }
    }

    pub fn normalize(token: &str) -> String {
        token.to_lowercase()
    }

    /// Counts one occurrence, adding the type if new.
    pub fn count(&mut self, token: &str) -> usize {
        let id = self.insert(token);
        self.freq[id] += 1;
        id
    }

    /// Adds a type without counting it (e.g. dev-only words that still
    /// deserve their pre-trained vector).
    pub fn insert(&mut self, token: &str) -> usize {
        let key = Self::normalize(token);
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.tokens.len();
        self.index.insert(key.clone(), id);
        self.tokens.push(key);
        self.freq.push(0);
        id
    }

    /// Drops counted types seen fewer than `min_count` times, keeping
    /// first-seen order for the survivors.
    pub fn prune(&mut self, min_count: u64) {
        if min_count <= 1 {
            return;
        }
        let mut kept = Vocabulary::new();
        for id in Self::RESERVED..self.tokens.len() {
            if self.freq[id] >= min_count {
                let nid = kept.insert(&self.tokens[id]);
                kept.freq[nid] = self.freq[id];
            }
        }
        *self = kept;
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(&Self::normalize(token)).copied().unwrap_or(Self::UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(&Self::normalize(token))
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn frequency(&self, id: usize) -> u64 {
        self.freq[id]
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == Self::RESERVED
    }

    pub fn tokens(&self) -> impl Iterator<Item = (usize, &str)> {
        self.tokens.iter().enumerate().map(|(i, t)| (i, t.as_str()))
    }

    /// FNV-1a over the token list; detects checkpoint/vocabulary drift.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for t in &self.tokens {
            for b in t.bytes().chain(std::iter::once(0xff)) {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }

    /// `token<TAB>id<TAB>frequency` per line.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}", t, i, self.freq[i])?;
        }
        w.flush()
    }

    pub fn read_tsv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
            freq: Vec::new(),
        };
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let perr = |msg: &str| Error::Parse {
                path: path.display().to_string(),
                line: n + 1,
                msg: msg.to_string(),
            };
            let mut parts = line.split('\t');
            let (Some(tok), Some(id), Some(freq), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(perr("expected token<TAB>id<TAB>frequency"));
            };
            let id: usize = id.parse().map_err(|_| perr("bad id"))?;
            let freq: u64 = freq.parse().map_err(|_| perr("bad frequency"))?;
            if id != vocab.tokens.len() {
                return Err(perr("ids must be dense and ordered"));
            }
            vocab.index.insert(tok.to_string(), id);
            vocab.tokens.push(tok.to_string());
            vocab.freq.push(freq);
        }
        if vocab.tokens.len() < Self::RESERVED
            || vocab.tokens[Self::PAD] != Self::PAD_TOKEN
            || vocab.tokens[Self::UNK] != Self::UNK_TOKEN
        {
            return Err(Error::Version(format!("{} lacks the reserved symbols", path.display())));
        }
        Ok(vocab)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EmbeddingLoadReport {
    /// Vocabulary types (excluding reserved symbols) absent from the file.
    pub misses: usize,
    /// Repeated tokens in the file; the first occurrence wins.
    pub duplicates: usize,
}

/// Reads a GloVe-style text file: one token then `dim` floats per line.
/// Returns a `|V| x dim` table; PAD, UNK and missing types are zero rows.
pub fn load_pretrained_embeddings(
    path: impl AsRef<Path>,
    vocab: &Vocabulary,
    dim: usize,
) -> Result<(Tensor, EmbeddingLoadReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file), &path.display().to_string(), vocab, dim)
}

pub fn read_embeddings<R: BufRead>(
    reader: R,
    source: &str,
    vocab: &Vocabulary,
    dim: usize,
) -> Result<(Tensor, EmbeddingLoadReport)> {
    let mut table = Tensor::zeros(&[vocab.len(), dim]);
    let mut seen = vec![false; vocab.len()];
    let mut file_seen: HashMap<String, ()> = HashMap::new();
    let mut report = EmbeddingLoadReport::default();
    let mut offset: u64 = 0;
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        let line_start = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts.next().expect("non-empty line has a token");
        let values: Vec<&str> = parts.collect();
        if values.len() != dim {
            return Err(Error::Format {
                offset: line_start,
                msg: format!("{source} line {}: expected {dim} values, found {}", n + 1, values.len()),
            });
        }
        let mut row = Vec::with_capacity(dim);
        for v in values {
            let x: f32 = v.parse().map_err(|_| Error::Parse {
                path: source.to_string(),
                line: n + 1,
                msg: format!("not a number: {v:?}"),
            })?;
            row.push(x as f64);
        }
        if file_seen.insert(token.to_string(), ()).is_some() {
            report.duplicates += 1;
            continue;
        }
        if !vocab.contains(token) {
            continue;
        }
        let id = vocab.id(token);
        if id < Vocabulary::RESERVED || seen[id] {
            continue;
        }
        seen[id] = true;
        table.data[id * dim..(id + 1) * dim].copy_from_slice(&row);
    }
    report.misses = seen[Vocabulary::RESERVED..].iter().filter(|&&s| !s).count();
    Ok((table, report))
}

/// Character id for the CNN: Latin-1 code points map to themselves (+1),
/// everything else shares one bucket. Id 0 is padding.
pub fn char_id(c: char) -> usize {
    let cp = c as u32;
    if cp < 256 {
        cp as usize + 1
    } else {
        257
    }
}
pub const CHAR_VOCAB: usize = 258;
pub const PAD_CHAR: usize = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CharCnnConfig {
    pub char_dim: usize,
    pub widths: Vec<usize>,
    pub filters_per_width: usize,
}

impl Default for CharCnnConfig {
    fn default() -> Self {
        CharCnnConfig {
            char_dim: 16,
            widths: vec![1, 2, 3, 4, 5],
            filters_per_width: 20,
        }
    }
}

impl CharCnnConfig {
    pub fn out_dim(&self) -> usize {
        self.widths.len() * self.filters_per_width
    }

    pub fn max_width(&self) -> usize {
        self.widths.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Debug, Clone)]
struct Conv {
    width: usize,
    w: ParamId,
    b: ParamId,
}

/// Convolution over character embeddings, max-pooled over positions and
/// squashed with tanh.
#[derive(Debug, Clone)]
pub struct CharCnn {
    pub config: CharCnnConfig,
    table: ParamId,
    convs: Vec<Conv>,
}

impl CharCnn {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, config: CharCnnConfig, rng: &mut R) -> Self {
        let e = config.char_dim;
        let table = store.add(
            format!("{prefix}.char_table"),
            Tensor::uniform(&[CHAR_VOCAB, e], 1.0 / (e as f64).sqrt(), rng),
        );
        let convs = config
            .widths
            .iter()
            .map(|&width| Conv {
                width,
                w: store.add(
                    format!("{prefix}.conv{width}.w"),
                    fan_in_init(&[width * e, config.filters_per_width], rng),
                ),
                b: store.add(format!("{prefix}.conv{width}.b"), Tensor::zeros(&[config.filters_per_width])),
            })
            .collect();
        CharCnn { config, table, convs }
    }

    /// Character ids as fed to the convolution: the word (or one padding
    /// character if empty) followed by `max_width` padding characters.
    pub fn char_ids(&self, word: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = word.chars().map(char_id).collect();
        if ids.is_empty() {
            ids.push(PAD_CHAR);
        }
        ids.extend(std::iter::repeat_n(PAD_CHAR, self.config.max_width()));
        ids
    }

    /// Runs the CNN over explicit character ids; returns a `[out_dim]` vector.
    pub fn forward_ids(&self, g: &mut Graph, ids: &[usize]) -> Result<Var, TensorError> {
        let len = ids.len();
        if len < self.config.max_width() {
            return Err(TensorError::arg("char_cnn", format!("{len} characters is shorter than the widest filter")));
        }
        let table = g.param(self.table);
        let emb = g.gather_rows(table, ids)?;
        let mut pooled = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let windows = len - conv.width + 1;
            let shifted: Vec<Var> = (0..conv.width)
                .map(|k| g.slice_rows(emb, k, windows))
                .collect::<Result<_, _>>()?;
            let unfolded = g.concat(&shifted, 1)?;
            let w = g.param(conv.w);
            let b = g.param(conv.b);
            let pre = g.matmul(unfolded, w)?;
            let pre = g.add_bias(pre, b)?;
            pooled.push(g.max_rows(pre)?);
        }
        let cat = g.concat(&pooled, 0)?;
        Ok(g.tanh(cat))
    }

    pub fn forward_word(&self, g: &mut Graph, word: &str) -> Result<Var, TensorError> {
        self.forward_ids(g, &self.char_ids(word))
    }

    /// `n x out_dim`, computing each distinct surface form once.
    pub fn forward_words(&self, g: &mut Graph, words: &[&str]) -> Result<Var, TensorError> {
        let mut slot: HashMap<&str, usize> = HashMap::new();
        let mut uniques = Vec::new();
        let rows: Vec<usize> = words
            .iter()
            .map(|&w| {
                *slot.entry(w).or_insert_with(|| {
                    uniques.push(w);
                    uniques.len() - 1
                })
            })
            .collect();
        let d = self.config.out_dim();
        let mut vecs = Vec::with_capacity(uniques.len());
        for w in uniques {
            let v = self.forward_word(g, w)?;
            vecs.push(g.reshape(v, &[1, d])?);
        }
        let stacked = g.concat(&vecs, 0)?;
        g.gather_rows(stacked, &rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmbeddedSequence {
    /// Frozen word vectors, `n x d_w`.
    pub words: Var,
    /// `[w_t; c_t]`, `n x (d_w + d_c)`.
    pub x: Var,
}

#[derive(Debug, Clone)]
pub struct TokenEmbedder {
    pub word_table: ParamId,
    pub cnn: CharCnn,
    pub word_dim: usize,
}

impl TokenEmbedder {
    /// `table` must be `|V| x d_w`; it is registered frozen.
    pub fn new<R: Rng>(store: &mut ParamStore, table: Tensor, cnn_config: CharCnnConfig, rng: &mut R) -> Self {
        let word_dim = table.shape[1];
        let word_table = store.add_frozen("embed.words", table);
        let cnn = CharCnn::new(store, "embed.char_cnn", cnn_config, rng);
        TokenEmbedder { word_table, cnn, word_dim }
    }

    pub fn out_dim(&self) -> usize {
        self.word_dim + self.cnn.config.out_dim()
    }

    /// Embeds a sequence. `surfaces` are the original-cased token strings
    /// seen by the char CNN; an empty string means the token was dropped to UNK.
    pub fn embed_sequence(&self, g: &mut Graph, ids: &[usize], surfaces: &[&str]) -> Result<EmbeddedSequence, TensorError> {
        if ids.len() != surfaces.len() {
            return Err(TensorError::dim("embed_sequence", &[ids.len()], &[surfaces.len()]));
        }
        if ids.is_empty() {
            return Err(TensorError::arg("embed_sequence", "empty sequence"));
        }
        let table = g.param(self.word_table);
        let words = g.gather_rows(table, ids)?;
        let chars = self.cnn.forward_words(g, surfaces)?;
        let x = g.concat(&[words, chars], 1)?;
        Ok(EmbeddedSequence { words, x })
    }

    /// `x_t` for one token as a `[d_w + d_c]` vector.
    pub fn embed_token(&self, g: &mut Graph, token_id: usize, word: &str) -> Result<Var, TensorError> {
        let seq = self.embed_sequence(g, &[token_id], &[word])?;
        g.reshape(seq.x, &[self.out_dim()])
    }
}

/// Replaces each id by UNK with probability `rate` in train mode.
pub fn word_dropout<R: Rng>(ids: &[usize], rate: f64, rng: &mut R, mode: Mode) -> Result<Vec<usize>, TensorError> {
    check_rate("word_dropout", rate)?;
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(ids.to_vec());
    }
    Ok(ids
        .iter()
        .map(|&id| if rng.gen::<f64>() < rate { Vocabulary::UNK } else { id })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab_of(words: &[&str]) -> Vocabulary {
        let mut v = Vocabulary::new();
        for w in words {
            v.count(w);
        }
        v
    }

    #[test]
    fn full_coverage_round_trips_exactly() {
        let v = vocab_of(&["cat", "dog"]);
        let file = "cat 0.5 -1.25 3\ndog 1e-3 2 0.1\n";
        let (t, rep) = read_embeddings(file.as_bytes(), "mem", &v, 3).unwrap();
        assert_eq!(rep, EmbeddingLoadReport::default());
        assert_eq!(t.row(v.id("cat")), &[0.5, -1.25, 3.0]);
        assert_eq!(t.row(v.id("dog")), &[1e-3f32 as f64, 2.0, 0.1f32 as f64]);
        assert_eq!(t.row(Vocabulary::UNK), &[0.0; 3]);
    }

    #[test]
    fn missing_token_gets_unk_row_and_is_counted() {
        let v = vocab_of(&["cat", "emu"]);
        let (t, rep) = read_embeddings("cat 1 2\n".as_bytes(), "mem", &v, 2).unwrap();
        assert_eq!(rep.misses, 1);
        assert_eq!(t.row(v.id("emu")), t.row(Vocabulary::UNK));
    }

    #[test]
    fn duplicate_token_first_wins() {
        let v = vocab_of(&["cat"]);
        let file = "cat 1 2\nfoo 0 0\ncat 9 9\n";
        let (t, rep) = read_embeddings(file.as_bytes(), "mem", &v, 2).unwrap();
        assert_eq!(rep.duplicates, 1);
        assert_eq!(t.row(v.id("cat")), &[1.0, 2.0]);
    }

    #[test]
    fn malformed_and_wrong_width_lines() {
        let v = vocab_of(&["cat"]);
        match read_embeddings("cat 1 x\n".as_bytes(), "mem", &v, 2) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
        match read_embeddings("foo 1 2\ncat 1 2 3\n".as_bytes(), "mem", &v, 2) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 8);
                assert!(msg.contains("line 2"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lookup_is_case_insensitive() {
        let v = vocab_of(&["The"]);
        assert_eq!(v.id("the"), v.id("THE"));
        assert_ne!(v.id("the"), Vocabulary::UNK);
    }

    #[test]
    fn tsv_round_trip() {
        let v = vocab_of(&["a", "b", "a"]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vocab.tsv");
        v.write_tsv(std::fs::File::create(&p).unwrap()).unwrap();
        let back = Vocabulary::read_tsv(&p).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.fingerprint(), v.fingerprint());
    }

    #[test]
    fn default_output_dimension_is_400() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let v = vocab_of(&["x"]);
        let emb = TokenEmbedder::new(&mut store, Tensor::zeros(&[v.len(), 300]), CharCnnConfig::default(), &mut rng);
        assert_eq!(emb.out_dim(), 400);
        let mut g = Graph::new(&store);
        let x = emb.embed_token(&mut g, v.id("x"), "x").unwrap();
        assert_eq!(g.shape(x), &[400]);
        let empty = emb.embed_token(&mut g, Vocabulary::UNK, "").unwrap();
        assert_eq!(g.shape(empty), &[400]);
    }

    #[test]
    fn word_dropout_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ids: Vec<usize> = (0..100_000).map(|i| 2 + i % 50).collect();
        assert_eq!(word_dropout(&ids, 0.0, &mut rng, Mode::Train).unwrap(), ids);
        assert_eq!(word_dropout(&ids, 0.5, &mut rng, Mode::Eval).unwrap(), ids);
        assert!(word_dropout(&ids, 1.0, &mut rng, Mode::Train).is_err());
        let dropped = word_dropout(&ids, 0.15, &mut rng, Mode::Train).unwrap();
        let frac = dropped.iter().filter(|&&i| i == Vocabulary::UNK).count() as f64 / ids.len() as f64;
        assert!((frac - 0.15).abs() < 0.01, "{frac}");
    }
}

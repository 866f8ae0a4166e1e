//! SQuAD ingestion, tokenization, answer alignment and batching.
//!
//! All character offsets are Unicode scalar indices, the unit SQuAD's
//! `answer_start` is expressed in.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::Value;

use crate::embedder::Vocabulary;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SquadExample {
    pub id: String,
    pub context: String,
    pub question: String,
    /// `(answer text, character start)` in file order.
    pub answers: Vec<(String, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedExample {
    pub id: String,
    pub context: String,
    pub passage: Vec<Token>,
    pub question: Vec<Token>,
    /// Inclusive, 0-based token spans; one per alignable gold answer.
    pub gold_spans: Vec<(usize, usize)>,
    /// Gold answer texts as given in the file (all of them, for scoring).
    pub gold_texts: Vec<String>,
}

impl TokenizedExample {
    /// Source substring covered by passage tokens `l..=r`.
    pub fn span_text(&self, l: usize, r: usize) -> String {
        let start = self.passage[l].start;
        let end = self.passage[r].end;
        self.context.chars().skip(start).take(end - start).collect()
    }
}

fn json_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Json {
        path: path.to_string(),
        msg: msg.into(),
    }
}

fn field<'a>(v: &'a Value, key: &str, path: &str) -> Result<&'a Value> {
    v.get(key).ok_or_else(|| json_err(path, format!("missing field `{key}`")))
}

fn str_field(v: &Value, key: &str, path: &str) -> Result<String> {
    field(v, key, path)?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| json_err(&format!("{path}.{key}"), "expected a string"))
}

fn array_field<'a>(v: &'a Value, key: &str, path: &str) -> Result<&'a Vec<Value>> {
    field(v, key, path)?
        .as_array()
        .ok_or_else(|| json_err(&format!("{path}.{key}"), "expected an array"))
}

/// Walks the SQuAD v1.1 layout `data -> paragraphs -> qas -> answers`.
pub fn parse_squad_str(text: &str) -> Result<Vec<SquadExample>> {
    let root: Value = serde_json::from_str(text).map_err(|e| json_err("$", e.to_string()))?;
    let mut out = Vec::new();
    for (a, article) in array_field(&root, "data", "$")?.iter().enumerate() {
        let apath = format!("$.data[{a}]");
        for (p, para) in array_field(article, "paragraphs", &apath)?.iter().enumerate() {
            let ppath = format!("{apath}.paragraphs[{p}]");
            let context = str_field(para, "context", &ppath)?;
            for (q, qa) in array_field(para, "qas", &ppath)?.iter().enumerate() {
                let qpath = format!("{ppath}.qas[{q}]");
                let id = str_field(qa, "id", &qpath)?;
                let question = str_field(qa, "question", &qpath)?;
                let mut answers = Vec::new();
                for (k, ans) in array_field(qa, "answers", &qpath)?.iter().enumerate() {
                    let anpath = format!("{qpath}.answers[{k}]");
                    let text = str_field(ans, "text", &anpath)?;
                    let start = field(ans, "answer_start", &anpath)?
                        .as_u64()
                        .ok_or_else(|| json_err(&format!("{anpath}.answer_start"), "expected a non-negative integer"))?;
                    answers.push((text, start as usize));
                }
                if answers.is_empty() {
                    return Err(json_err(&format!("{qpath}.answers"), "no gold answers"));
                }
                out.push(SquadExample {
                    id,
                    context: context.clone(),
                    question,
                    answers,
                });
            }
        }
    }
    Ok(out)
}

pub fn parse_squad_json(path: impl AsRef<Path>) -> Result<Vec<SquadExample>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_squad_str(&text)
}

/// Whitespace split, then every leading and trailing ASCII punctuation
/// character becomes its own token. Inner punctuation (hyphens, apostrophes,
/// decimal points) stays attached.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        split_punct(&chars, start, i, &mut tokens);
    }
    tokens
}

fn split_punct(chars: &[char], start: usize, end: usize, out: &mut Vec<Token>) {
    let mut lo = start;
    let mut hi = end;
    while lo < hi && chars[lo].is_ascii_punctuation() {
        lo += 1;
    }
    while hi > lo && chars[hi - 1].is_ascii_punctuation() {
        hi -= 1;
    }
    let mk = |s: usize, e: usize| Token {
        text: chars[s..e].iter().collect(),
        start: s,
        end: e,
    };
    for k in start..lo {
        out.push(mk(k, k + 1));
    }
    if lo < hi {
        out.push(mk(lo, hi));
    }
    for k in hi.max(lo)..end {
        out.push(mk(k, k + 1));
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AlignError {
    EmptyAnswer,
    /// The answer start falls outside every token (whitespace, or past the end).
    StartOutsideTokens(usize),
    NoCoveringSpan,
}

/// Smallest token span whose characters cover
/// `[answer_start, answer_start + len(answer_text))`.
pub fn align_answer(tokens: &[Token], answer_text: &str, answer_start: usize) -> Result<(usize, usize), AlignError> {
    let len = answer_text.chars().count();
    if len == 0 {
        return Err(AlignError::EmptyAnswer);
    }
    let end = answer_start + len;
    let l = tokens
        .iter()
        .position(|t| t.start <= answer_start && answer_start < t.end)
        .ok_or(AlignError::StartOutsideTokens(answer_start))?;
    let r = tokens
        .iter()
        .rposition(|t| t.start < end)
        .filter(|&r| r >= l)
        .ok_or(AlignError::NoCoveringSpan)?;
    Ok((l, r))
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct SkippedExample {
    pub id: String,
    pub reason: String,
}

/// Tokenizes and aligns. Examples with no alignable gold answer are
/// returned in the skip list rather than failing the whole load.
pub fn prepare_examples(raw: &[SquadExample]) -> (Vec<TokenizedExample>, Vec<SkippedExample>) {
    let mut ok = Vec::with_capacity(raw.len());
    let mut skipped = Vec::new();
    for ex in raw {
        let passage = tokenize(&ex.context);
        let question = tokenize(&ex.question);
        let mut spans = Vec::new();
        let mut first_err = None;
        for (text, start) in &ex.answers {
            match align_answer(&passage, text, *start) {
                Ok(s) => spans.push(s),
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if spans.is_empty() || question.is_empty() {
            let reason = if question.is_empty() {
                "empty question".to_string()
            } else {
                format!("alignment failure: {:?}", first_err.unwrap_or(AlignError::NoCoveringSpan))
            };
            skipped.push(SkippedExample {
                id: ex.id.clone(),
                reason,
            });
            continue;
        }
        ok.push(TokenizedExample {
            id: ex.id.clone(),
            context: ex.context.clone(),
            passage,
            question,
            gold_spans: spans,
            gold_texts: ex.answers.iter().map(|(t, _)| t.clone()).collect(),
        });
    }
    (ok, skipped)
}

/// Tokenizes every example, keeping those whose answers do not align (with
/// empty `gold_spans`). Used where every question needs a prediction.
pub fn tokenize_examples(raw: &[SquadExample]) -> Vec<TokenizedExample> {
    raw.iter()
        .map(|ex| {
            let passage = tokenize(&ex.context);
            let gold_spans = ex
                .answers
                .iter()
                .filter_map(|(text, start)| align_answer(&passage, text, *start).ok())
                .collect();
            TokenizedExample {
                id: ex.id.clone(),
                context: ex.context.clone(),
                question: tokenize(&ex.question),
                passage,
                gold_spans,
                gold_texts: ex.answers.iter().map(|(t, _)| t.clone()).collect(),
            }
        })
        .collect()
}

pub fn write_skip_report(path: impl AsRef<Path>, skipped: &[SkippedExample]) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in skipped {
        let line = serde_json::to_string(s).expect("skip record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

/// Frequency-counted vocabulary over passage and question tokens
/// (lowercased). Types below `min_count` fold into UNK.
pub fn build_vocab(examples: &[TokenizedExample], min_count: u64) -> Vocabulary {
    let mut vocab = Vocabulary::new();
    for ex in examples {
        for t in ex.passage.iter().chain(&ex.question) {
            vocab.count(&t.text);
        }
    }
    vocab.prune(min_count);
    vocab
}

/// Token ids for one example, ready for batching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub passage_ids: Vec<usize>,
    pub question_ids: Vec<usize>,
}

pub fn encode(ex: &TokenizedExample, vocab: &Vocabulary) -> EncodedExample {
    EncodedExample {
        passage_ids: ex.passage.iter().map(|t| vocab.id(&t.text)).collect(),
        question_ids: ex.question.iter().map(|t| vocab.id(&t.text)).collect(),
    }
}

/// Padded id matrices for up to `batch_size` examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    /// Positions of the batch members in the source slice.
    pub indices: Vec<usize>,
    pub passage_ids: Vec<Vec<usize>>,
    pub passage_lens: Vec<usize>,
    pub passage_mask: Vec<Vec<bool>>,
    pub question_ids: Vec<Vec<usize>>,
    pub question_lens: Vec<usize>,
    pub question_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn pad(rows: Vec<&[usize]>, pad_id: usize) -> (Vec<Vec<usize>>, Vec<usize>, Vec<Vec<bool>>) {
    let max = rows.iter().map(|r| r.len()).max().unwrap_or(0);
    let lens: Vec<usize> = rows.iter().map(|r| r.len()).collect();
    let ids = rows
        .iter()
        .map(|r| {
            let mut v = r.to_vec();
            v.resize(max, pad_id);
            v
        })
        .collect();
    let masks = lens.iter().map(|&l| (0..max).map(|i| i < l).collect()).collect();
    (ids, lens, masks)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BatchOptions {
    /// `None` keeps file order.
    pub shuffle_seed: Option<u64>,
    /// Group similar passage lengths together (after shuffling).
    pub sort_by_length: bool,
}

/// One epoch of batches; the final partial batch is emitted.
pub fn batches(examples: &[EncodedExample], batch_size: usize, opts: BatchOptions) -> impl Iterator<Item = Batch> + '_ {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut order: Vec<usize> = (0..examples.len()).collect();
    if let Some(seed) = opts.shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    if opts.sort_by_length {
        order.sort_by_key(|&i| examples[i].passage_ids.len());
    }
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(|c| c.to_vec()).collect();
    chunks.into_iter().map(move |indices| {
        let (passage_ids, passage_lens, passage_mask) =
            pad(indices.iter().map(|&i| examples[i].passage_ids.as_slice()).collect(), Vocabulary::PAD);
        let (question_ids, question_lens, question_mask) =
            pad(indices.iter().map(|&i| examples[i].question_ids.as_slice()).collect(), Vocabulary::PAD);
        Batch {
            indices,
            passage_ids,
            passage_lens,
            passage_mask,
            question_ids,
            question_lens,
            question_mask,
        }
    })
}

/// Distinct lowercased types across passages and questions.
pub fn distinct_types(examples: &[TokenizedExample]) -> HashSet<String> {
    examples
        .iter()
        .flat_map(|e| e.passage.iter().chain(&e.question))
        .map(|t| t.text.to_lowercase())
        .collect()
}

//! Exact-match and bag-of-tokens F1 with SQuAD answer normalization.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::data::SquadExample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizeOptions {
    /// Strip every Unicode punctuation character instead of ASCII only.
    pub unicode_punctuation: bool,
}

fn articles() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b(a|an|the)\b").expect("valid regex"))
}

fn unicode_punct() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\p{P}").expect("valid regex"))
}

/// Lowercase, drop punctuation, drop articles, collapse whitespace, split.
pub fn normalize_answer_with(text: &str, opts: NormalizeOptions) -> Vec<String> {
    let lower = text.to_lowercase();
    let no_punct: String = if opts.unicode_punctuation {
        unicode_punct().replace_all(&lower, "").into_owned()
    } else {
        lower.chars().filter(|c| !c.is_ascii_punctuation()).collect()
    };
    let no_articles = articles().replace_all(&no_punct, " ");
    no_articles.split_whitespace().map(str::to_string).collect()
}

pub fn normalize_answer(text: &str) -> Vec<String> {
    normalize_answer_with(text, NormalizeOptions::default())
}

pub fn exact_match(prediction: &str, golds: &[&str]) -> f64 {
    let p = normalize_answer(prediction);
    if golds.iter().any(|g| normalize_answer(g) == p) {
        1.0
    } else {
        0.0
    }
}

fn f1_tokens(pred: &[String], gold: &[String]) -> f64 {
    if pred.is_empty() || gold.is_empty() {
        return if pred.is_empty() && gold.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: HashMap<&str, i64> = HashMap::new();
    for t in gold {
        *counts.entry(t).or_default() += 1;
    }
    let mut overlap = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t.as_str()) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Best F1 over the gold answers.
pub fn f1(prediction: &str, golds: &[&str]) -> f64 {
    let p = normalize_answer(prediction);
    golds
        .iter()
        .map(|g| f1_tokens(&p, &normalize_answer(g)))
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionScore {
    pub em: f64,
    pub f1: f64,
    pub missing: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Percent, one decimal.
    pub em: f64,
    /// Percent, one decimal.
    pub f1: f64,
    pub total: usize,
    pub missing: usize,
    pub per_question: BTreeMap<String, QuestionScore>,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

/// Scores `predictions` (question id -> answer text) against every gold
/// question. Missing predictions score 0 and are counted.
pub fn evaluate(golds: &[SquadExample], predictions: &HashMap<String, String>) -> EvalResult {
    let mut per_question = BTreeMap::new();
    let (mut em_sum, mut f1_sum, mut missing) = (0.0, 0.0, 0);
    for ex in golds {
        let answers: Vec<&str> = ex.answers.iter().map(|a| a.0.as_str()).collect();
        let score = match predictions.get(&ex.id) {
            Some(pred) => QuestionScore {
                em: exact_match(pred, &answers),
                f1: f1(pred, &answers),
                missing: false,
            },
            None => {
                log::warn!("no prediction for question {}", ex.id);
                missing += 1;
                QuestionScore {
                    em: 0.0,
                    f1: 0.0,
                    missing: true,
                }
            }
        };
        em_sum += score.em;
        f1_sum += score.f1;
        per_question.insert(ex.id.clone(), score);
    }
    let n = golds.len().max(1) as f64;
    EvalResult {
        em: round1(100.0 * em_sum / n),
        f1: round1(100.0 * f1_sum / n),
        total: golds.len(),
        missing,
        per_question,
    }
}

/// Reads a `{"question id": "answer text", ...}` prediction file.
pub fn read_predictions(path: impl AsRef<Path>) -> Result<HashMap<String, String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.display().to_string(),
        msg: e.to_string(),
    })
}

pub fn evaluate_files(predictions: impl AsRef<Path>, gold: impl AsRef<Path>) -> Result<EvalResult> {
    let preds = read_predictions(predictions)?;
    let golds = crate::data::parse_squad_json(gold)?;
    Ok(evaluate(&golds, &preds))
}

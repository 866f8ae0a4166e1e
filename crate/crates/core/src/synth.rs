//! Deterministic synthetic resources: GloVe-format word vectors for any word
//! list, and templated SQuAD-shaped data for scale experiments.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

/// FNV-1a over the word's bytes.
fn word_hash(word: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// A vector that depends only on `(word, dim, seed)`.
pub fn synthetic_vector(word: &str, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(word_hash(word) ^ seed);
    (0..dim).map(|_| rng.gen_range(-0.5f32..0.5)).collect()
}

/// Writes one `word v1 ... vd` line per word.
pub fn write_synthetic_embeddings<'a, W: Write>(
    words: impl IntoIterator<Item = &'a str>,
    dim: usize,
    seed: u64,
    mut out: W,
) -> std::io::Result<usize> {
    let mut n = 0;
    for w in words {
        write!(out, "{w}")?;
        for v in synthetic_vector(w, dim, seed) {
            write!(out, " {v}")?;
        }
        writeln!(out)?;
        n += 1;
    }
    out.flush()?;
    Ok(n)
}

const SYLLABLES: &[&str] = &["ka", "lo", "mi", "ren", "to", "sa", "vel", "dor", "an", "is", "bru", "fen", "gal", "hor", "ju", "nex"];
const JOBS: &[&str] = &["baker", "sailor", "painter", "doctor", "farmer", "teacher", "miner", "weaver", "judge", "potter"];
const ITEMS: &[&str] = &["lamp", "violin", "compass", "clock", "bridge", "engine", "telescope", "loom", "map", "kiln"];
const COLORS: &[&str] = &["red", "blue", "green", "golden", "silver", "black", "white", "amber"];

fn name(rng: &mut ChaCha8Rng, syllables: usize) -> String {
    let mut s: String = (0..syllables).map(|_| *SYLLABLES.choose(rng).unwrap()).collect();
    s[..1].make_ascii_uppercase();
    s
}

struct Person {
    name: String,
    town: String,
    year: u32,
    job: &'static str,
    item: &'static str,
    color: &'static str,
}

/// `n` question-answer pairs over templated biographies. Each paragraph
/// mentions three people with overlapping attributes, so answering needs
/// the question's subject to be matched in context.
pub fn synthetic_squad(n: usize, seed: u64) -> Value {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut articles = Vec::new();
    let mut made = 0;
    let mut p = 0;
    while made < n {
        let people: Vec<Person> = (0..3)
            .map(|_| Person {
                name: name(&mut rng, 2),
                town: name(&mut rng, 3),
                year: rng.gen_range(1700..1990),
                job: JOBS.choose(&mut rng).unwrap(),
                item: ITEMS.choose(&mut rng).unwrap(),
                color: COLORS.choose(&mut rng).unwrap(),
            })
            .collect();
        let mut context = String::new();
        let mut spans = Vec::new();
        for person in &people {
            let mut field = |ctx: &mut String, text: &str, key: &'static str| {
                spans.push((person.name.clone(), key, text.to_string(), ctx.chars().count()));
                ctx.push_str(text);
            };
            context.push_str(&format!("{} was born in ", person.name));
            field(&mut context, &person.town, "town");
            context.push_str(" in ");
            field(&mut context, &person.year.to_string(), "year");
            context.push_str(&format!(" . {} worked as a ", person.name));
            field(&mut context, person.job, "job");
            context.push_str(" and owned a ");
            field(&mut context, &format!("{} {}", person.color, person.item), "item");
            context.push_str(" . ");
        }
        let context = context.trim_end().to_string();
        let mut qas = Vec::new();
        let mut order: Vec<usize> = (0..spans.len()).collect();
        order.shuffle(&mut rng);
        for &k in order.iter().take(4) {
            if made >= n {
                break;
            }
            let (who, key, text, start) = &spans[k];
            let question = match *key {
                "town" => format!("Where was {who} born ?"),
                "year" => format!("In which year was {who} born ?"),
                "job" => format!("What did {who} work as ?"),
                _ => format!("What did {who} own ?"),
            };
            qas.push(json!({
                "id": format!("syn{seed}-{made:05}"),
                "question": question,
                "answers": [{"text": text, "answer_start": start}],
            }));
            made += 1;
        }
        articles.push(json!({
            "title": format!("synthetic-{p}"),
            "paragraphs": [{"context": context, "qas": qas}],
        }));
        p += 1;
    }
    json!({"version": "1.1", "data": articles})
}

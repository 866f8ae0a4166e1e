mod common;

use common::{fixture, rng};
use ctxqa_core::data::{parse_squad_str, prepare_examples};
use ctxqa_core::lm::toy::{read_corpus, ToyLm, ToyLmConfig};
use ctxqa_core::lm::{read_lm_states, write_lm_states, LmDims, LmLayer, LmRecord, SeqKind};
use rand::Rng;
use sha2::{Digest, Sha256};

fn random_records(n: usize, dims: LmDims, seed: u64) -> Vec<LmRecord> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let tokens = r.gen_range(1..40);
            let mut layer = |d: usize| (0..tokens * d).map(|_| r.gen_range(-3.0f32..3.0)).collect::<Vec<f32>>();
            let layers = [layer(dims.emb), layer(dims.l1), layer(dims.l2)];
            LmRecord {
                example_id: format!("ex-{}", i / 2),
                kind: if i % 2 == 0 { SeqKind::Question } else { SeqKind::Passage },
                tokens,
                layers,
            }
        })
        .collect()
}

#[test]
fn thousand_records_round_trip_bit_exactly() {
    let dims = LmDims { emb: 12, l1: 8, l2: 5 };
    let records = random_records(1000, dims, 3);
    let mut first = Vec::new();
    write_lm_states(&mut first, dims, &records).unwrap();
    let store = read_lm_states(first.as_slice()).unwrap();
    assert_eq!(store.len(), 1000);
    assert_eq!(store.dims(), Some(dims));
    let reread: Vec<LmRecord> = records
        .iter()
        .map(|r| store.get(&r.example_id, r.kind).unwrap().clone())
        .collect();
    for (a, b) in records.iter().zip(&reread) {
        for layer in LmLayer::ALL {
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.layer(layer)), bits(b.layer(layer)));
        }
    }
    let mut second = Vec::new();
    write_lm_states(&mut second, dims, &reread).unwrap();
    assert_eq!(Sha256::digest(&first), Sha256::digest(&second));
}

fn toy_lm() -> ToyLm {
    let corpus = std::fs::read_to_string(fixture("lm_corpus.txt")).unwrap();
    ToyLm::train(&read_corpus(&corpus), ToyLmConfig::default()).unwrap().0
}

#[test]
fn emb_layer_is_type_constant_and_l1_is_contextual() {
    let squad = r#"{"data": [{"paragraphs": [
        {"context": "She sat on the river bank and watched the water .",
         "qas": [{"id": "b1", "question": "Where did she sit ?", "answers": [{"text": "river bank", "answer_start": 15}]}]},
        {"context": "He paid the money into the bank before noon .",
         "qas": [{"id": "b2", "question": "Where did the money go ?", "answers": [{"text": "the bank", "answer_start": 23}]}]}
    ]}]}"#;
    let raw = parse_squad_str(squad).unwrap();
    let (ex, skipped) = prepare_examples(&raw);
    assert!(skipped.is_empty());
    let lm = toy_lm();
    let mut bytes = Vec::new();
    write_lm_states(&mut bytes, lm.dims(), &lm.precompute(&ex).unwrap()).unwrap();
    let store = read_lm_states(bytes.as_slice()).unwrap();
    let dims = lm.dims();

    let vector = |id: &str, word: &str, layer: LmLayer| {
        let e = ex.iter().find(|e| e.id == id).unwrap();
        let t = e.passage.iter().position(|t| t.text == word).unwrap();
        let d = dims.get(layer);
        store.get(id, SeqKind::Passage).unwrap().layer(layer)[t * d..(t + 1) * d].to_vec()
    };
    assert_eq!(vector("b1", "bank", LmLayer::Emb), vector("b2", "bank", LmLayer::Emb));
    assert_ne!(vector("b1", "bank", LmLayer::L1), vector("b2", "bank", LmLayer::L1));

    // Every repeated surface form across the file shares its emb vector.
    let mut seen: std::collections::HashMap<String, Vec<f32>> = Default::default();
    for e in &ex {
        for (kind, toks) in [(SeqKind::Question, &e.question), (SeqKind::Passage, &e.passage)] {
            let rec = store.get(&e.id, kind).unwrap();
            for (t, tok) in toks.iter().enumerate() {
                let v = rec.layer(LmLayer::Emb)[t * dims.emb..(t + 1) * dims.emb].to_vec();
                let prev = seen.entry(tok.text.clone()).or_insert_with(|| v.clone());
                assert_eq!(*prev, v, "{}", tok.text);
            }
        }
    }
}

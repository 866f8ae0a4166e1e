mod common;

use common::{fixture, toy_data};
use ctxqa_core::data::{parse_squad_json, prepare_examples, tokenize, TokenizedExample};
use proptest::prelude::*;

#[test]
fn bundled_fixture_aligns_completely() {
    let raw = parse_squad_json(fixture("squad_toy.json")).unwrap();
    assert_eq!(raw.len(), 32);
    let (ok, skipped) = prepare_examples(&raw);
    assert!(skipped.is_empty(), "{skipped:?}");
    for ex in &ok {
        let (l, r) = ex.gold_spans[0];
        assert_eq!(ex.span_text(l, r), ex.gold_texts[0], "{}", ex.id);
    }
}

#[test]
fn tokenization_is_deterministic() {
    let (raw, ok, _) = toy_data();
    for (r, ex) in raw.iter().zip(&ok) {
        assert_eq!(tokenize(&r.context), ex.passage);
        assert_eq!(tokenize(&r.context), tokenize(&r.context));
    }
}

fn text() -> impl Strategy<Value = String> {
    let piece = prop::sample::select(vec![
        "word", "Belém", "naïve", "3.5", "U.S.", "(a)", "don't", "\u{2014}", "\"quoted\"", ",", ".", "é", "日本", "  ", "\n", "\t", "x-y",
    ]);
    prop::collection::vec(piece, 0..25).prop_map(|v| v.join(" "))
}

proptest! {
    #[test]
    fn token_offsets_reproduce_the_source(s in text()) {
        let chars: Vec<char> = s.chars().collect();
        let toks = tokenize(&s);
        for t in &toks {
            let covered: String = chars[t.start..t.end].iter().collect();
            prop_assert_eq!(&covered, &t.text);
        }
        if !toks.is_empty() {
            let ex = TokenizedExample {
                id: "p".into(),
                context: s.clone(),
                passage: toks.clone(),
                question: Vec::new(),
                gold_spans: Vec::new(),
                gold_texts: Vec::new(),
            };
            let n = toks.len();
            for l in 0..n {
                for r in l..n.min(l + 4) {
                    let want: String = chars[toks[l].start..toks[r].end].iter().collect();
                    prop_assert_eq!(ex.span_text(l, r), want);
                }
            }
        }
    }
}

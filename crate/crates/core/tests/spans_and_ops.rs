mod common;

use common::{random_table, tiny_config, toy_data};
use ctxqa_core::model::{ModelInput, QaModel};
use ctxqa_core::rasor::enumerate_spans;
use ctxqa_core::reembed::Variant;
use ctxqa_core::{Graph, ParamStore, Tensor};
use proptest::prelude::*;

fn brute_force(n: usize, max_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for l in 0..n {
        for r in 0..n {
            if r >= l && r - l < max_len {
                out.push((l, r));
            }
        }
    }
    out
}

#[test]
fn span_enumeration_matches_brute_force() {
    for max_len in [1, 5, 30] {
        for n in 1..=200 {
            let spans = enumerate_spans(n, max_len).unwrap();
            assert_eq!(spans, brute_force(n, max_len), "n={n} L={max_len}");
            let formula: usize = (1..=n).map(|l| max_len.min(n - l + 1)).sum();
            assert_eq!(spans.len(), formula);
        }
    }
    assert!(enumerate_spans(0, 30).is_err());
    assert_eq!(enumerate_spans(5, 30).unwrap().len(), 15);
    assert_eq!(enumerate_spans(40, 30).unwrap().len(), 765);
}

fn softmax_of(values: &[f64]) -> Vec<f64> {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let x = g.input(Tensor::new(vec![1, values.len()], values.to_vec()).unwrap());
    let s = g.softmax(x).unwrap();
    g.value(s).to_vec()
}

proptest! {
    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(
        xs in prop::collection::vec(-50.0f64..50.0, 1..40),
        c in -100.0f64..100.0,
    ) {
        let p = softmax_of(&xs);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        for (a, b) in p.iter().zip(softmax_of(&shifted)) {
            prop_assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn split_then_concat_round_trips(
        rows in 1usize..6,
        sizes in prop::collection::vec(1usize..5, 1..5),
        seed in any::<u64>(),
        axis in 0usize..2,
    ) {
        let total: usize = sizes.iter().sum();
        let shape = if axis == 0 { vec![total, rows] } else { vec![rows, total] };
        let t = Tensor::uniform(&shape, 1.0, &mut common::rng(seed));
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.input(t.clone());
        let parts = g.split(x, axis, &sizes).unwrap();
        prop_assert_eq!(parts.len(), sizes.len());
        let back = g.concat(&parts, axis).unwrap();
        prop_assert_eq!(g.tensor(back), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn model_output_is_a_distribution_for_any_finite_table(scale in 0.0f64..200.0, seed in any::<u64>(), k in 0usize..32) {
        let (_, ex, vocab) = toy_data();
        let mut t = random_table(vocab.len(), 6, seed);
        t.data.iter_mut().for_each(|x| *x *= scale);
        let mut store = ParamStore::new();
        let model = QaModel::new(&mut store, tiny_config(Some(Variant::Tr)), t, seed).unwrap();
        let input = ModelInput::from_example(&ex[k], &vocab, None).unwrap();
        let d = model.distribution(&store, &input).unwrap();
        prop_assert!(d.probs.iter().all(|p| p.is_finite() && *p >= 0.0));
        prop_assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

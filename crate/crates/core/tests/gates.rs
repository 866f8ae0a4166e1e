mod common;

use std::collections::HashSet;

use common::{random_table, tiny_config, toy_data};
use ctxqa_core::model::{ModelInput, QaModel};
use ctxqa_core::reembed::{export_gate_csv, record_gate_stats, GateStats, Variant};
use ctxqa_core::{Graph, Mode, ParamStore, Tensor};

fn gate_tensors() -> (Vec<(Tensor, Vec<usize>)>, ctxqa_core::embedder::Vocabulary) {
    let (_, ex, vocab) = toy_data();
    let mut store = ParamStore::new();
    let model = QaModel::new(&mut store, tiny_config(Some(Variant::Tr)), random_table(vocab.len(), 6, 2), 5).unwrap();
    let mut out = Vec::new();
    for e in &ex {
        let input = ModelInput::from_example(e, &vocab, None).unwrap();
        let mut g = Graph::with_mode(&store, Mode::Eval, 0);
        let o = model.forward(&mut g, &input).unwrap();
        out.push((g.tensor(o.question_gates.unwrap()), input.question.ids.clone()));
        out.push((g.tensor(o.passage_gates.unwrap()), input.passage.ids.clone()));
    }
    (out, vocab)
}

fn accumulate<'a>(seqs: impl Iterator<Item = &'a (Tensor, Vec<usize>)>) -> GateStats {
    let mut stats = GateStats::new();
    for (t, ids) in seqs {
        record_gate_stats(t, ids, &mut stats).unwrap();
    }
    stats
}

#[test]
fn means_do_not_depend_on_visit_order() {
    let (seqs, _) = gate_tensors();
    let forward = accumulate(seqs.iter());
    let backward = accumulate(seqs.iter().rev());
    let mut interleaved: Vec<_> = seqs.iter().collect();
    interleaved.sort_by_key(|(t, _)| t.data.len());
    let shuffled = accumulate(interleaved.into_iter());
    let collect = |s: &GateStats| s.iter().map(|(id, m)| (id, m.to_bits())).collect::<Vec<_>>();
    let mut a = collect(&forward);
    let mut b = collect(&backward);
    let mut c = collect(&shuffled);
    a.sort();
    b.sort();
    c.sort();
    assert_eq!(a, b);
    assert_eq!(a, c);
}

#[test]
fn csv_has_one_row_per_observed_type() {
    let (seqs, vocab) = gate_tensors();
    let stats = accumulate(seqs.iter());
    let observed: HashSet<usize> = seqs.iter().flat_map(|(_, ids)| ids.iter().copied()).collect();
    let mut buf = Vec::new();
    export_gate_csv(&stats, &vocab, "toy", "{}", &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with("# split=toy config={}\n"));
    let body = text.split_once('\n').unwrap().1;
    let mut reader = csv::Reader::from_reader(body.as_bytes());
    assert_eq!(reader.headers().unwrap(), vec!["word_type", "frequency", "mean_gate"]);
    let rows: Vec<csv::StringRecord> = reader.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), observed.len());
    for row in &rows {
        let mean: f64 = row[2].parse().unwrap();
        assert!(mean > 0.0 && mean < 1.0, "{row:?}");
    }
}

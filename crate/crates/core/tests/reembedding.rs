mod common;

use common::{bits, copy_shared, random_table, rng, tiny_config, toy_data};
use ctxqa_core::encoders::{BiLstmConfig, MlpConfig};
use ctxqa_core::model::{ModelInput, QaModel};
use ctxqa_core::reembed::{highway, GateOverride, ReembedConfig, ReembedderParams, Variant};
use ctxqa_core::{Graph, Mode, ParamStore, Tensor};
use rand::Rng;

#[test]
fn sandwich_bound_over_ten_thousand_tokens() {
    let (n, d) = (10_000, 8);
    let mut r = rng(11);
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let logits: Vec<f64> = (0..n * d).map(|_| r.gen_range(-8.0..8.0)).collect();
    let pre = g.input(Tensor::new(vec![n, d], logits).unwrap());
    let gate = g.sigmoid(pre);
    let w = g.input(Tensor::uniform(&[n, d], 3.0, &mut r));
    let zp = g.input(Tensor::uniform(&[n, d], 4.0, &mut r));
    let z = g.tanh(zp);
    let out = highway(&mut g, gate, w, z).unwrap();
    let (w, z, out) = (g.value(w).to_vec(), g.value(z).to_vec(), g.value(out).to_vec());
    for k in 0..n * d {
        let (lo, hi) = (w[k].min(z[k]), w[k].max(z[k]));
        assert!(lo <= out[k] && out[k] <= hi, "coordinate {k}: {} not in [{lo}, {hi}]", out[k]);
    }
}

fn first_example() -> (ModelInput, usize) {
    let (_, ex, vocab) = toy_data();
    (ModelInput::from_example(&ex[0], &vocab, None).unwrap(), vocab.len())
}

#[test]
fn forced_open_gates_reduce_to_the_base_reader() {
    let (input, v) = first_example();
    let table = random_table(v, 6, 1);
    let mut base_store = ParamStore::new();
    let base = QaModel::new(&mut base_store, tiny_config(None), table.clone(), 2).unwrap();
    let mut tr_store = ParamStore::new();
    let mut tr = QaModel::new(&mut tr_store, tiny_config(Some(Variant::Tr)), table, 3).unwrap();
    copy_shared(&base_store, &mut tr_store);
    tr.reembedder.as_mut().unwrap().gate_override = Some(GateOverride::Ones);

    let mut g = Graph::with_mode(&tr_store, Mode::Eval, 0);
    let out = tr.forward(&mut g, &input).unwrap();
    let ids = &input.passage.ids;
    let table = tr_store.get(tr.embedder.word_table);
    let reps = g.tensor(out.passage_reps);
    for (t, &id) in ids.iter().enumerate() {
        assert_eq!(bits(reps.row(t)), bits(table.row(id)), "token {t}");
    }
    let a = base.distribution(&base_store, &input).unwrap();
    let b = tr.distribution(&tr_store, &input).unwrap();
    assert_eq!(a.spans, b.spans);
    assert_eq!(bits(&a.probs), bits(&b.probs));
}

#[test]
fn forced_closed_gates_emit_the_transform() {
    let (input, v) = first_example();
    let mut store = ParamStore::new();
    let mut tr = QaModel::new(&mut store, tiny_config(Some(Variant::Tr)), random_table(v, 6, 1), 3).unwrap();
    tr.reembedder.as_mut().unwrap().gate_override = Some(GateOverride::Zeros);
    let mut g = Graph::with_mode(&store, Mode::Eval, 0);
    let out = tr.forward(&mut g, &input).unwrap();
    let reps = g.tensor(out.passage_reps);
    let table = store.get(tr.embedder.word_table);
    assert!(reps.data.iter().all(|x| x.abs() < 1.0));
    for (t, &id) in input.passage.ids.iter().enumerate() {
        assert_ne!(bits(reps.row(t)), bits(table.row(id)));
    }
}

fn reembedder(variant: Variant) -> (ParamStore, ReembedderParams) {
    let mut store = ParamStore::new();
    let cfg = ReembedConfig {
        variant,
        bilstm: BiLstmConfig {
            layers: 1,
            hidden: 3,
            input_dropout: 0.0,
            hidden_dropout: 0.0,
            variational: false,
        },
        mlp: MlpConfig {
            hidden: vec![5],
            dropout: 0.0,
        },
        bias: true,
    };
    let re = ReembedderParams::new(&mut store, "re", &cfg, 7, 4, 0, &mut rng(4)).unwrap();
    (store, re)
}

/// `w'` for rows `x`, with the first 4 columns of `x` as `w`.
fn run(store: &ParamStore, re: &ReembedderParams, x: &Tensor) -> Tensor {
    let mut g = Graph::with_mode(store, Mode::Eval, 0);
    let xv = g.input(x.clone());
    let w = g.slice_cols(xv, 0, 4).unwrap();
    let u = re.compute_context(&mut g, xv, None, "t").unwrap();
    let out = re.reembed(&mut g, xv, w, u).unwrap();
    g.tensor(out.words)
}

fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let d = x.shape[1];
    let mut out = x.clone();
    for (i, &p) in perm.iter().enumerate() {
        out.data[i * d..(i + 1) * d].copy_from_slice(x.row(p));
    }
    out
}

#[test]
fn mlp_context_is_position_wise_and_bilstm_context_is_not() {
    let mut x = Tensor::uniform(&[5, 7], 1.0, &mut rng(5));
    // The same token at positions 0 and 3.
    let row0 = x.row(0).to_vec();
    x.data[21..28].copy_from_slice(&row0);
    let perm = [3, 1, 4, 0, 2];

    let (store, mlp) = reembedder(Variant::TrMlp);
    let out = run(&store, &mlp, &x);
    let permuted = run(&store, &mlp, &permute_rows(&x, &perm));
    assert_eq!(bits(&permuted.data), bits(&permute_rows(&out, &perm).data));
    assert_eq!(bits(out.row(0)), bits(out.row(3)));

    let (store, tr) = reembedder(Variant::Tr);
    let out = run(&store, &tr, &x);
    assert_ne!(bits(out.row(0)), bits(out.row(3)), "context should separate repeated tokens");
}

#[test]
fn question_side_ignores_the_passage() {
    let (_, ex, vocab) = toy_data();
    let mut store = ParamStore::new();
    for variant in [Variant::Tr, Variant::TrMlp] {
        let model = QaModel::new(&mut store, tiny_config(Some(variant)), random_table(vocab.len(), 6, 1), 3).unwrap();
        let a = ModelInput::from_example(&ex[0], &vocab, None).unwrap();
        let mut b = a.clone();
        let other = ModelInput::from_example(&ex[9], &vocab, None).unwrap();
        b.passage = other.passage;
        let q = |input: &ModelInput| {
            let mut g = Graph::with_mode(&store, Mode::Eval, 0);
            let out = model.forward(&mut g, input).unwrap();
            (g.tensor(out.question_reps).data, g.tensor(out.passage_reps).data)
        };
        let (qa, pa) = q(&a);
        let (qb, pb) = q(&b);
        assert_eq!(bits(&qa), bits(&qb), "{variant}");
        assert_ne!(bits(&pa), bits(&pb));
        store = ParamStore::new();
    }
}

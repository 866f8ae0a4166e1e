mod common;

use common::{bits, rng};
use ctxqa_core::embedder::{CharCnn, CharCnnConfig, TokenEmbedder, PAD_CHAR};
use ctxqa_core::encoders::{BiLstm, BiLstmConfig, LstmCell, Mlp, MlpConfig};
use ctxqa_core::{Graph, Mode, ParamStore, Tensor};

fn bilstm(layers: usize, hidden: usize, input_dim: usize, seed: u64) -> (ParamStore, BiLstm) {
    let mut store = ParamStore::new();
    let cfg = BiLstmConfig {
        layers,
        hidden,
        input_dropout: 0.0,
        hidden_dropout: 0.0,
        variational: false,
    };
    let enc = BiLstm::new(&mut store, "enc", input_dim, cfg, &mut rng(seed));
    (store, enc)
}

#[test]
fn coupled_gates_sum_to_one_exactly() {
    let mut store = ParamStore::new();
    let cell = LstmCell::new(&mut store, "cell", 5, 7, &mut rng(1));
    let mut r = rng(2);
    for _ in 0..200 {
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::uniform(&[1, 5], 3.0, &mut r));
        let h = g.input(Tensor::uniform(&[1, 7], 1.0, &mut r));
        let c = g.input(Tensor::uniform(&[1, 7], 2.0, &mut r));
        let step = cell.step(&mut g, x, Some(h), Some(c)).unwrap();
        let i = g.value(step.input_gate).to_vec();
        let f = g.value(step.forget_gate).to_vec();
        for (a, b) in i.iter().zip(&f) {
            assert_eq!(a + b, 1.0, "i={a} f={b}");
        }
    }
}

#[test]
fn bilstm_directions_are_causal() {
    let (n, d, h) = (7, 4, 3);
    let (store, enc) = bilstm(2, h, d, 5);
    let base = Tensor::uniform(&[n, d], 1.0, &mut rng(6));
    let run = |x: &Tensor| {
        let mut g = Graph::new(&store);
        let v = g.input(x.clone());
        let first = enc.forward(&mut g, v).unwrap()[0];
        g.tensor(first)
    };
    let out = run(&base);
    for j in 0..n {
        let mut x = base.clone();
        for k in 0..d {
            x.data[j * d + k] += 0.5;
        }
        let moved = run(&x);
        for t in 0..n {
            let fwd_same = bits(&out.row(t)[..h]) == bits(&moved.row(t)[..h]);
            let bwd_same = bits(&out.row(t)[h..]) == bits(&moved.row(t)[h..]);
            assert_eq!(fwd_same, t < j, "forward state at {t}, perturbed {j}");
            assert_eq!(bwd_same, t > j, "backward state at {t}, perturbed {j}");
        }
    }
}

#[test]
fn reversing_input_swaps_directions_when_cells_share_weights() {
    let (n, d, h) = (6, 3, 4);
    let (mut store, enc) = bilstm(1, h, d, 8);
    let names: Vec<String> = store.iter().map(|(_, name, _)| name.to_string()).collect();
    for name in names.iter().filter(|n| n.contains(".fwd")) {
        let src = store.get(store.id(name).unwrap()).clone();
        let dst = store.id(&name.replace(".fwd", ".bwd")).unwrap();
        *store.get_mut(dst) = src;
    }
    let x = Tensor::uniform(&[n, d], 1.0, &mut rng(9));
    let mut rev = x.clone();
    for t in 0..n {
        rev.data[t * d..(t + 1) * d].copy_from_slice(x.row(n - 1 - t));
    }
    let mut g = Graph::new(&store);
    let a = g.input(x);
    let b = g.input(rev);
    let oa = enc.forward_top(&mut g, a).unwrap();
    let ob = enc.forward_top(&mut g, b).unwrap();
    let (oa, ob) = (g.tensor(oa), g.tensor(ob));
    for t in 0..n {
        assert_eq!(bits(&oa.row(t)[..h]), bits(&ob.row(n - 1 - t)[h..]));
        assert_eq!(bits(&oa.row(t)[h..]), bits(&ob.row(n - 1 - t)[..h]));
    }
}

#[test]
fn mlp_is_position_wise_in_eval_mode() {
    let mut store = ParamStore::new();
    let cfg = MlpConfig {
        hidden: vec![6, 5],
        dropout: 0.3,
    };
    let mlp = Mlp::new(&mut store, "mlp", 4, 3, &cfg, &mut rng(3));
    let mut x = Tensor::uniform(&[5, 4], 1.0, &mut rng(4));
    // Row 3 duplicates row 0.
    let row0 = x.row(0).to_vec();
    x.data[12..16].copy_from_slice(&row0);
    let perm = [4, 2, 0, 1, 3];
    let mut px = x.clone();
    for (i, &p) in perm.iter().enumerate() {
        px.data[i * 4..(i + 1) * 4].copy_from_slice(x.row(p));
    }
    let mut g = Graph::with_mode(&store, Mode::Eval, 0);
    let a = g.input(x);
    let b = g.input(px);
    let oa = mlp.forward(&mut g, a).unwrap();
    let ob = mlp.forward(&mut g, b).unwrap();
    let (oa, ob) = (g.tensor(oa), g.tensor(ob));
    assert_eq!(bits(oa.row(0)), bits(oa.row(3)));
    for (i, &p) in perm.iter().enumerate() {
        assert_eq!(bits(ob.row(i)), bits(oa.row(p)));
    }
}

#[test]
fn char_cnn_ignores_extra_trailing_padding() {
    let mut store = ParamStore::new();
    let cfg = CharCnnConfig {
        char_dim: 4,
        widths: vec![1, 2, 3],
        filters_per_width: 3,
    };
    let cnn = CharCnn::new(&mut store, "cnn", cfg, &mut rng(2));
    for word in ["a", "word", "Belém", ""] {
        let ids = cnn.char_ids(word);
        let mut g = Graph::new(&store);
        let base = cnn.forward_ids(&mut g, &ids).unwrap();
        let base = g.value(base).to_vec();
        for extra in 1..4 {
            let mut padded = ids.clone();
            padded.extend(std::iter::repeat_n(PAD_CHAR, extra));
            let v = cnn.forward_ids(&mut g, &padded).unwrap();
            assert_eq!(bits(g.value(v)), bits(&base), "{word:?} + {extra}");
        }
    }
}

#[test]
fn embed_token_depends_only_on_type_and_parameters() {
    let mut store = ParamStore::new();
    let table = Tensor::uniform(&[5, 3], 1.0, &mut rng(1));
    let emb = TokenEmbedder::new(&mut store, table, CharCnnConfig::default(), &mut rng(2));
    let once = |word: &str, id: usize| {
        let mut g = Graph::with_mode(&store, Mode::Eval, 0);
        let v = emb.embed_token(&mut g, id, word).unwrap();
        g.value(v).to_vec()
    };
    assert_eq!(bits(&once("river", 3)), bits(&once("river", 3)));
    let mut g = Graph::with_mode(&store, Mode::Eval, 0);
    let seq = emb.embed_sequence(&mut g, &[3, 4, 3], &["river", "bank", "river"]).unwrap();
    let x = g.tensor(seq.x);
    assert_eq!(bits(x.row(0)), bits(x.row(2)));
    assert_eq!(bits(x.row(0)), bits(&once("river", 3)));
    assert_ne!(bits(&once("river", 3)), bits(&once("River", 3)));
}

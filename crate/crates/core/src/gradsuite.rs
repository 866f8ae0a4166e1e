//! Registry of gradient checks: every differentiable graph operation, each
//! model component, and the end-to-end loss. Each case builds its own
//! parameters from a seed and reduces its output to a scalar through a fixed
//! random projection.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{prepare_examples, SquadExample};
use crate::embedder::{CharCnn, CharCnnConfig};
use crate::encoders::{BiLstm, BiLstmConfig, FeedForward, LstmCell, Mlp, MlpConfig};
use crate::error::Result;
use crate::model::{ModelConfig, ModelInput, QaModel};
use crate::rasor::{enumerate_spans, span_loss, Rasor, RasorConfig};
use crate::reembed::{ReembedConfig, ReembedderParams, Variant};
use crate::tensor::{grad_check, GradCheckOptions, Graph, ParamStore, Tensor, Var};

pub type CaseFn = Box<dyn Fn(&mut Graph) -> Result<Var>>;

pub struct CaseSetup {
    pub params: ParamStore,
    pub f: CaseFn,
    pub options: GradCheckOptions,
}

pub struct GradCase {
    pub name: &'static str,
    pub build: fn(u64) -> Result<CaseSetup>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub max_relative_error: f64,
    /// `(parameter, coordinate, seed)` of the largest error.
    pub worst: Option<(String, usize, u64)>,
    pub seeds: usize,
    pub coords_checked: usize,
    pub passed: bool,
}

pub const TOLERANCE: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform values kept at least 0.1 away from zero (ReLU kinks).
fn away_from_zero(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::uniform(shape, 1.0, r);
    for x in &mut t.data {
        *x = x.signum() * (0.1 + x.abs());
    }
    t
}

/// Each column holds a shuffled set of levels 0.3 apart (plus small
/// jitter), so column maxima are never within a finite-difference step of
/// a tie.
fn separated_columns(rows: usize, cols: usize, r: &mut ChaCha8Rng) -> Tensor {
    let mut t = Tensor::zeros(&[rows, cols]);
    for j in 0..cols {
        let mut levels: Vec<usize> = (0..rows).collect();
        levels.shuffle(r);
        for (i, level) in levels.into_iter().enumerate() {
            t.data[i * cols + j] = level as f64 * 0.3 - 0.9 + r.gen_range(-0.05..0.05);
        }
    }
    t
}

/// `sum(v * W)` for a fixed random `W`, so every output coordinate carries
/// a distinct weight.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let w = Tensor::uniform(g.shape(v), 1.0, &mut rng(seed ^ 0x5eed_cafe));
    let w = g.input(w);
    let m = g.mul(v, w)?;
    Ok(g.sum(m))
}

/// Zero-initialized parameters (biases) are replaced by random values so
/// that no ReLU sits exactly on its kink.
fn setup(mut params: ParamStore, f: CaseFn) -> Result<CaseSetup> {
    let ids: Vec<_> = params.trainable_ids().collect();
    for id in ids {
        let t = params.get_mut(id);
        if t.data.iter().all(|&x| x == 0.0) {
            let mut r = rng(0xb1a5 + id.index() as u64);
            for x in &mut t.data {
                *x = r.gen_range(-0.5..0.5);
            }
        }
    }
    Ok(CaseSetup {
        params,
        f,
        options: GradCheckOptions::default(),
    })
}

fn unary(seed: u64, shape: &[usize], op: fn(&mut Graph, Var) -> Result<Var>) -> Result<CaseSetup> {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let a = s.add("a", away_from_zero(shape, &mut r));
    setup(
        s,
        Box::new(move |g| {
            let x = g.param(a);
            let y = op(g, x)?;
            project(g, y, seed)
        }),
    )
}

fn binary(seed: u64, sa: &[usize], sb: &[usize], op: fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<CaseSetup> {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let a = s.add("a", away_from_zero(sa, &mut r));
    let b = s.add("b", away_from_zero(sb, &mut r));
    setup(
        s,
        Box::new(move |g| {
            let x = g.param(a);
            let y = g.param(b);
            let z = op(g, x, y)?;
            project(g, z, seed)
        }),
    )
}

fn tiny_lstm_config() -> BiLstmConfig {
    BiLstmConfig {
        layers: 2,
        hidden: 3,
        input_dropout: 0.0,
        hidden_dropout: 0.0,
        variational: false,
    }
}

fn reembed_case(seed: u64, variant: Variant) -> Result<CaseSetup> {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    let lm_dim = if variant.lm_layer().is_some() { 2 } else { 0 };
    let cfg = ReembedConfig {
        variant,
        bilstm: BiLstmConfig {
            layers: 1,
            ..tiny_lstm_config()
        },
        mlp: MlpConfig {
            hidden: vec![4, 3],
            dropout: 0.0,
        },
        bias: true,
    };
    let p = ReembedderParams::new(&mut s, "reembed", &cfg, 6, 4, lm_dim, &mut r)?;
    let x = s.add("x", Tensor::uniform(&[3, 6], 1.0, &mut r));
    let w = s.add("w", Tensor::uniform(&[3, 4], 1.0, &mut r));
    let lm = (lm_dim > 0).then(|| Tensor::uniform(&[3, lm_dim], 1.0, &mut r));
    setup(
        s,
        Box::new(move |g| {
            let xv = g.param(x);
            let wv = g.param(w);
            let u = p.compute_context(g, xv, lm.as_ref(), "gradcheck")?;
            let out = p.reembed(g, xv, wv, u)?;
            project(g, out.words, seed)
        }),
    )
}

fn tiny_rasor(s: &mut ParamStore, r: &mut ChaCha8Rng) -> Rasor {
    Rasor::new(
        s,
        "rasor",
        4,
        RasorConfig {
            d_f: 3,
            ff_dropout: 0.0,
            max_span: 30,
            bilstm: BiLstmConfig {
                layers: 1,
                ..tiny_lstm_config()
            },
        },
        r,
    )
}

fn end_to_end(seed: u64, variant: Option<Variant>) -> Result<CaseSetup> {
    let raw = SquadExample {
        id: "toy".into(),
        context: "cats chase small mice".into(),
        question: "who chase mice".into(),
        answers: vec![("cats".into(), 0)],
    };
    let (examples, _) = prepare_examples(&[raw]);
    let ex = &examples[0];
    let vocab = crate::data::build_vocab(&examples, 1);
    let mut r = rng(seed);
    let table = Tensor::uniform(&[vocab.len(), 4], 1.0, &mut r);
    let mut s = ParamStore::new();
    let config = ModelConfig {
        variant,
        word_dim: 4,
        char_cnn: CharCnnConfig {
            char_dim: 3,
            widths: vec![1, 2],
            filters_per_width: 2,
        },
        bilstm: BiLstmConfig {
            layers: 1,
            ..tiny_lstm_config()
        },
        mlp: MlpConfig {
            hidden: vec![3],
            dropout: 0.0,
        },
        d_f: 3,
        ff_dropout: 0.0,
        word_dropout: 0.0,
        ..ModelConfig::default()
    };
    let model = QaModel::new(&mut s, config, table, seed)?;
    let input = ModelInput::from_example(ex, &vocab, None)?;
    let gold = ex.gold_spans[0];
    setup(s, Box::new(move |g| model.loss(g, &input, gold)))
}

fn cases() -> Vec<GradCase> {
    macro_rules! case {
        ($name:expr, $build:expr) => {
            GradCase { name: $name, build: $build }
        };
    }
    vec![
        case!("matmul", |s| binary(s, &[3, 4], &[4, 2], |g, a, b| Ok(g.matmul(a, b)?))),
        case!("add", |s| binary(s, &[2, 3], &[2, 3], |g, a, b| Ok(g.add(a, b)?))),
        case!("mul", |s| binary(s, &[2, 3], &[2, 3], |g, a, b| Ok(g.mul(a, b)?))),
        case!("add_bias", |s| binary(s, &[3, 4], &[4], |g, a, b| Ok(g.add_bias(a, b)?))),
        case!("affine", |s| unary(s, &[2, 3], |g, a| Ok(g.affine(a, -1.7, 0.3)))),
        case!("one_minus", |s| unary(s, &[2, 3], |g, a| Ok(g.one_minus(a)))),
        case!("sigmoid", |s| unary(s, &[10, 10], |g, a| Ok(g.sigmoid(a)))),
        case!("tanh", |s| unary(s, &[10, 10], |g, a| Ok(g.tanh(a)))),
        case!("relu", |s| unary(s, &[10, 10], |g, a| Ok(g.relu(a)))),
        case!("softmax", |s| unary(s, &[3, 5], |g, a| Ok(g.softmax(a)?))),
        case!("cross_entropy", |s| {
            let mut r = rng(s);
            let mut st = ParamStore::new();
            let a = st.add("a", Tensor::uniform(&[1, 6], 2.0, &mut r));
            let target = r.gen_range(0..6);
            setup(st, Box::new(move |g| {
                let x = g.param(a);
                Ok(g.cross_entropy(x, target)?)
            }))
        }),
        case!("concat", |s| binary(s, &[2, 3], &[2, 2], |g, a, b| Ok(g.concat(&[a, b], 1)?))),
        case!("split", |s| unary(s, &[4, 5], |g, a| {
            let parts = g.split(a, 1, &[2, 3])?;
            let flipped = g.concat(&[parts[1], parts[0]], 1)?;
            Ok(flipped)
        })),
        case!("slice_rows", |s| unary(s, &[5, 3], |g, a| Ok(g.slice_rows(a, 1, 3)?))),
        case!("slice_cols", |s| unary(s, &[3, 5], |g, a| Ok(g.slice_cols(a, 2, 2)?))),
        case!("row", |s| unary(s, &[4, 3], |g, a| Ok(g.row(a, 2)?))),
        case!("gather_rows", |s| unary(s, &[4, 3], |g, a| Ok(g.gather_rows(a, &[3, 0, 3, 1])?))),
        case!("broadcast_rows", |s| unary(s, &[1, 3], |g, a| Ok(g.broadcast_rows(a, 4)?))),
        case!("transpose", |s| unary(s, &[2, 5], |g, a| Ok(g.transpose(a)?))),
        case!("reshape", |s| unary(s, &[2, 6], |g, a| Ok(g.reshape(a, &[3, 4])?))),
        case!("sum", |s| unary(s, &[3, 3], |g, a| Ok(g.sum(a)))),
        case!("max_rows", |s| {
            let mut c = unary(s, &[6, 4], |g, a| Ok(g.max_rows(a)?))?;
            let id = c.params.id("a").expect("registered above");
            *c.params.get_mut(id) = separated_columns(6, 4, &mut rng(s));
            Ok(c)
        }),
        case!("dropout", |s| {
            let mut c = unary(s, &[6, 5], |g, a| Ok(g.dropout(a, 0.4)?))?;
            c.options.train_seed = Some(s);
            Ok(c)
        }),
        case!("dropout_shared_rows", |s| {
            let mut c = unary(s, &[6, 5], |g, a| Ok(g.dropout_shared_rows(a, 0.4)?))?;
            c.options.train_seed = Some(s);
            Ok(c)
        }),
        case!("lstm_step", |s| {
            let mut r = rng(s);
            let mut st = ParamStore::new();
            let cell = LstmCell::new(&mut st, "cell", 4, 3, &mut r);
            for k in 0..9 {
                st.get_mut(cell.b).data[k] = r.gen_range(-0.5..0.5);
            }
            let x = st.add("x", Tensor::uniform(&[1, 4], 1.0, &mut r));
            let h = st.add("h", Tensor::uniform(&[1, 3], 1.0, &mut r));
            let c = st.add("c", Tensor::uniform(&[1, 3], 1.0, &mut r));
            setup(st, Box::new(move |g| {
                let (xv, hv, cv) = (g.param(x), g.param(h), g.param(c));
                let step = cell.step(g, xv, Some(hv), Some(cv))?;
                let both = g.concat(&[step.h, step.c], 1)?;
                project(g, both, s)
            }))
        }),
        case!("bilstm", |s| {
            let mut r = rng(s);
            let mut st = ParamStore::new();
            let enc = BiLstm::new(&mut st, "enc", 3, tiny_lstm_config(), &mut r);
            let x = st.add("x", Tensor::uniform(&[4, 3], 1.0, &mut r));
            setup(st, Box::new(move |g| {
                let xv = g.param(x);
                let outs = enc.forward(g, xv)?;
                let all = g.concat(&outs, 1)?;
                project(g, all, s)
            }))
        }),
        case!("feed_forward", |s| {
            let mut r = rng(s);
            let mut st = ParamStore::new();
            let ff = FeedForward::new(&mut st, "ff", 4, 5, 0.0, &mut r);
            let x = st.add("x", away_from_zero(&[3, 4], &mut r));
            setup(st, Box::new(move |g| {
                let xv = g.param(x);
                let y = ff.forward(g, xv)?;
                project(g, y, s)
            }))
        }),
        case!("mlp", |s| {
            let mut r = rng(s);
            let mut st = ParamStore::new();
            let cfg = MlpConfig {
                hidden: vec![5, 5, 4],
                dropout: 0.0,
            };
            let mlp = Mlp::new(&mut st, "mlp", 4, 3, &cfg, &mut r);
            let x = st.add("x", away_from_zero(&[3, 4], &mut r));
            setup(st, Box::new(move |g| {
                let xv = g.param(x);
                let y = mlp.forward(g, xv)?;
                project(g, y, s)
            }))
        }),
        case!("char_cnn", |s| {
            let mut r = rng(s);
            let mut st = ParamStore::new();
            let cfg = CharCnnConfig {
                char_dim: 3,
                widths: vec![1, 2, 3],
                filters_per_width: 2,
            };
            let cnn = CharCnn::new(&mut st, "cnn", cfg, &mut r);
            setup(st, Box::new(move |g| {
                let y = cnn.forward_words(g, &["Tesla", "ox", "", "Tesla"])?;
                project(g, y, s)
            }))
        }),
        case!("reembed_tr", |s| reembed_case(s, Variant::Tr)),
        case!("reembed_tr_mlp", |s| reembed_case(s, Variant::TrMlp)),
        case!("reembed_tr_lm", |s| reembed_case(s, Variant::TrLmL1)),
        case!("question_indep", |s| {
            let mut r = rng(s);
            let mut st = ParamStore::new();
            let rasor = tiny_rasor(&mut st, &mut r);
            let q = st.add("q", Tensor::uniform(&[3, 4], 1.0, &mut r));
            setup(st, Box::new(move |g| {
                let qv = g.param(q);
                let (qi, _) = rasor.question_indep(g, qv)?;
                project(g, qi, s)
            }))
        }),
        case!("question_aligned", |s| {
            let mut r = rng(s);
            let mut st = ParamStore::new();
            let rasor = tiny_rasor(&mut st, &mut r);
            let p = st.add("p", Tensor::uniform(&[4, 4], 1.0, &mut r));
            let q = st.add("q", Tensor::uniform(&[3, 4], 1.0, &mut r));
            setup(st, Box::new(move |g| {
                let (pv, qv) = (g.param(p), g.param(q));
                let (qa, _) = rasor.question_aligned(g, pv, qv)?;
                project(g, qa, s)
            }))
        }),
        case!("encode_passage", |s| {
            let mut r = rng(s);
            let mut st = ParamStore::new();
            let rasor = tiny_rasor(&mut st, &mut r);
            let p = st.add("p", Tensor::uniform(&[4, 4], 1.0, &mut r));
            let qa = st.add("q_align", Tensor::uniform(&[4, 4], 1.0, &mut r));
            let qi = st.add("q_indep", Tensor::uniform(&[1, 6], 1.0, &mut r));
            setup(st, Box::new(move |g| {
                let (pv, qav, qiv) = (g.param(p), g.param(qa), g.param(qi));
                let h = rasor.encode_passage(g, pv, qav, qiv)?;
                project(g, h, s)
            }))
        }),
        case!("span_loss", |s| {
            let mut r = rng(s);
            let mut st = ParamStore::new();
            let rasor = tiny_rasor(&mut st, &mut r);
            let h = st.add("h", Tensor::uniform(&[4, 6], 1.0, &mut r));
            let spans = enumerate_spans(4, 3)?;
            let gold = spans[r.gen_range(0..spans.len())];
            setup(st, Box::new(move |g| {
                let hv = g.param(h);
                let logits = rasor.span_logits(g, hv, &spans)?;
                Ok(span_loss(g, logits, &spans, gold)?)
            }))
        }),
        case!("end_to_end_base", |s| end_to_end(s, None)),
        case!("end_to_end_tr", |s| end_to_end(s, Some(Variant::Tr))),
    ]
}

/// Every registered case, in report order.
pub fn registry() -> Vec<GradCase> {
    cases()
}

pub fn run_case(case: &GradCase, seeds: &[u64]) -> Result<CaseResult> {
    let mut result = CaseResult {
        name: case.name.to_string(),
        max_relative_error: 0.0,
        worst: None,
        seeds: seeds.len(),
        coords_checked: 0,
        passed: true,
    };
    for &seed in seeds {
        let setup = (case.build)(seed)?;
        let rep = grad_check(&setup.f, &setup.params, setup.options)?;
        result.coords_checked += rep.coords_checked;
        if result.worst.is_none() || rep.max_relative_error > result.max_relative_error {
            result.max_relative_error = rep.max_relative_error;
            result.worst = rep.worst.map(|(n, i)| (n, i, seed));
        }
    }
    result.passed = result.max_relative_error < TOLERANCE;
    Ok(result)
}

/// Runs every registered case over `seeds`.
pub fn run_suite(seeds: &[u64]) -> Result<Vec<CaseResult>> {
    registry().iter().map(|c| run_case(c, seeds)).collect()
}

/// A case whose backward pass is deliberately wrong; the harness must
/// flag it.
#[cfg(feature = "test-hooks")]
pub fn corrupted_case() -> GradCase {
    GradCase {
        name: "corrupted_identity",
        build: |s| unary(s, &[2, 3], |g, a| Ok(g.corrupted_identity(a))),
    }
}

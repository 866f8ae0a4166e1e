#![allow(dead_code)]

use std::path::PathBuf;

use ctxqa_core::data::{build_vocab, parse_squad_json, prepare_examples, SquadExample, TokenizedExample};
use ctxqa_core::embedder::{CharCnnConfig, Vocabulary};
use ctxqa_core::encoders::{BiLstmConfig, MlpConfig};
use ctxqa_core::model::ModelConfig;
use ctxqa_core::reembed::Variant;
use ctxqa_core::{ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn toy_data() -> (Vec<SquadExample>, Vec<TokenizedExample>, Vocabulary) {
    let raw = parse_squad_json(fixture("squad_toy.json")).unwrap();
    let (ok, skipped) = prepare_examples(&raw);
    assert!(skipped.is_empty(), "{skipped:?}");
    let vocab = build_vocab(&ok, 1);
    (raw, ok, vocab)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A small model that runs in milliseconds, dropout off.
pub fn tiny_config(variant: Option<Variant>) -> ModelConfig {
    ModelConfig {
        variant,
        word_dim: 6,
        char_cnn: CharCnnConfig {
            char_dim: 3,
            widths: vec![1, 2],
            filters_per_width: 2,
        },
        bilstm: BiLstmConfig {
            layers: 1,
            hidden: 3,
            input_dropout: 0.0,
            hidden_dropout: 0.0,
            variational: false,
        },
        mlp: MlpConfig {
            hidden: vec![4],
            dropout: 0.0,
        },
        d_f: 4,
        ff_dropout: 0.0,
        word_dropout: 0.0,
        ..ModelConfig::default()
    }
}

pub fn random_table(rows: usize, dim: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[rows, dim], 0.5, &mut rng(seed))
}

/// Copies every parameter of `from` into the same-named parameter of `to`.
pub fn copy_shared(from: &ParamStore, to: &mut ParamStore) {
    for (_, name, t) in from.iter() {
        let id = to.id(name).unwrap_or_else(|| panic!("{name} missing"));
        assert_eq!(to.get(id).shape, t.shape, "{name}");
        to.get_mut(id).data.clone_from(&t.data);
    }
}

pub fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

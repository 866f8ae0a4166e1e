//! The full reader: token embedding, optional re-embedding, and span
//! scoring, wired per example.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::TokenizedExample;
use crate::embedder::{CharCnnConfig, TokenEmbedder, Vocabulary};
use crate::encoders::{BiLstmConfig, MlpConfig};
use crate::error::{Error, Result};
use crate::lm::{LmLayer, LmStore, SeqKind};
use crate::rasor::{enumerate_spans, predict, score_spans, span_loss, Rasor, RasorConfig, SpanDistribution, SpanIndex};
use crate::reembed::{ReembedConfig, ReembedderParams, Variant};
use crate::tensor::{Graph, Mode, ParamStore, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `None` runs the reader directly on the frozen word vectors.
    pub variant: Option<Variant>,
    pub word_dim: usize,
    pub char_cnn: CharCnnConfig,
    /// Stack used by the re-embedding context encoder and by the reader.
    pub bilstm: BiLstmConfig,
    pub mlp: MlpConfig,
    pub reembed_bias: bool,
    pub d_f: usize,
    pub ff_dropout: f64,
    pub max_span: usize,
    pub word_dropout: f64,
    /// Feed raw word vectors rather than re-embedded ones to the
    /// passage-aligned question attention.
    pub align_on_raw_embeddings: bool,
    /// Width of the selected LM layer; 0 for non-LM variants.
    pub lm_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Some(Variant::Tr),
            word_dim: 300,
            char_cnn: CharCnnConfig::default(),
            bilstm: BiLstmConfig::default(),
            mlp: MlpConfig::default(),
            reembed_bias: true,
            d_f: 100,
            ff_dropout: 0.2,
            max_span: 30,
            word_dropout: 0.15,
            align_on_raw_embeddings: false,
            lm_dim: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceInput {
    pub ids: Vec<usize>,
    /// Original-cased surfaces for the char CNN; "" for dropped words.
    pub surfaces: Vec<String>,
    /// Selected-layer LM states, `n x lm_dim`.
    pub lm: Option<Tensor>,
}

impl SequenceInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub example_id: String,
    pub passage: SequenceInput,
    pub question: SequenceInput,
}

impl ModelInput {
    /// Looks tokens up in `vocab` and, when `lm` is given, joins the
    /// selected layer's states (token counts must agree exactly).
    pub fn from_example(ex: &TokenizedExample, vocab: &Vocabulary, lm: Option<(&LmStore, LmLayer)>) -> Result<Self> {
        let seq = |toks: &[crate::data::Token], kind: SeqKind| -> Result<SequenceInput> {
            Ok(SequenceInput {
                ids: toks.iter().map(|t| vocab.id(&t.text)).collect(),
                surfaces: toks.iter().map(|t| t.text.clone()).collect(),
                lm: match lm {
                    Some((store, layer)) => Some(store.join(&ex.id, kind, toks.len(), layer)?),
                    None => None,
                },
            })
        };
        Ok(ModelInput {
            example_id: ex.id.clone(),
            passage: seq(&ex.passage, SeqKind::Passage)?,
            question: seq(&ex.question, SeqKind::Question)?,
        })
    }

    /// Word dropout: each token independently becomes UNK (both its word
    /// vector and its character input) with probability `rate`.
    pub fn word_dropout<G: Rng>(&self, rate: f64, rng: &mut G) -> Result<Self> {
        let mut out = self.clone();
        for seq in [&mut out.passage, &mut out.question] {
            let dropped = crate::embedder::word_dropout(&seq.ids, rate, rng, Mode::Train)?;
            for (i, id) in dropped.into_iter().enumerate() {
                if id == Vocabulary::UNK && seq.ids[i] != Vocabulary::UNK {
                    seq.surfaces[i].clear();
                }
                seq.ids[i] = id;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub spans: Vec<SpanIndex>,
    /// `1 x spans.len()`.
    pub logits: Var,
    /// Word representations fed to the reader (re-embedded when gated).
    pub passage_reps: Var,
    pub question_reps: Var,
    pub passage_gates: Option<Var>,
    pub question_gates: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct QaModel {
    pub config: ModelConfig,
    pub embedder: TokenEmbedder,
    pub reembedder: Option<ReembedderParams>,
    pub rasor: Rasor,
}

struct Encoded {
    reps: Var,
    raw: Var,
    gates: Option<Var>,
}

impl QaModel {
    /// Registers all parameters in `store`. `word_table` (`|V| x d_w`) is
    /// stored frozen. Initialization is a function of `seed` only.
    pub fn new(store: &mut ParamStore, config: ModelConfig, word_table: Tensor, seed: u64) -> Result<Self> {
        if word_table.rank() != 2 || word_table.shape[1] != config.word_dim {
            return Err(Error::Config(format!(
                "word table has shape {:?}, expected [_, {}]",
                word_table.shape, config.word_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedder = TokenEmbedder::new(store, word_table, config.char_cnn.clone(), &mut rng);
        let reembedder = match config.variant {
            Some(variant) => Some(ReembedderParams::new(
                store,
                "reembed",
                &ReembedConfig {
                    variant,
                    bilstm: config.bilstm.clone(),
                    mlp: config.mlp.clone(),
                    bias: config.reembed_bias,
                },
                embedder.out_dim(),
                config.word_dim,
                config.lm_dim,
                &mut rng,
            )?),
            None => None,
        };
        let rasor = Rasor::new(
            store,
            "rasor",
            config.word_dim,
            RasorConfig {
                d_f: config.d_f,
                ff_dropout: config.ff_dropout,
                max_span: config.max_span,
                bilstm: config.bilstm.clone(),
            },
            &mut rng,
        );
        Ok(QaModel {
            config,
            embedder,
            reembedder,
            rasor,
        })
    }

    /// The LM layer this model consumes, if any.
    pub fn lm_layer(&self) -> Option<LmLayer> {
        self.config.variant.and_then(Variant::lm_layer)
    }

    fn encode_sequence(&self, g: &mut Graph, seq: &SequenceInput, example_id: &str) -> Result<Encoded> {
        if seq.is_empty() {
            return Err(Error::Alignment {
                example_id: example_id.to_string(),
                msg: "empty token sequence".into(),
            });
        }
        let surfaces: Vec<&str> = seq.surfaces.iter().map(String::as_str).collect();
        let emb = self.embedder.embed_sequence(g, &seq.ids, &surfaces)?;
        match &self.reembedder {
            Some(re) => {
                let u = re.compute_context(g, emb.x, seq.lm.as_ref(), example_id)?;
                let out = re.reembed(g, emb.x, emb.words, u)?;
                Ok(Encoded {
                    reps: out.words,
                    raw: emb.words,
                    gates: Some(out.gates),
                })
            }
            None => Ok(Encoded {
                reps: emb.words,
                raw: emb.words,
                gates: None,
            }),
        }
    }

    /// Span logits for one example. Dropout follows the graph's mode.
    pub fn forward(&self, g: &mut Graph, input: &ModelInput) -> Result<ModelOutput> {
        // Question and passage are contextualized separately.
        let q = self.encode_sequence(g, &input.question, &input.example_id)?;
        let p = self.encode_sequence(g, &input.passage, &input.example_id)?;
        let (q_indep, _) = self.rasor.question_indep(g, q.reps)?;
        let (p_src, q_src) = if self.config.align_on_raw_embeddings {
            (p.raw, q.raw)
        } else {
            (p.reps, q.reps)
        };
        let (q_align, _) = self.rasor.question_aligned(g, p_src, q_src)?;
        let h = self.rasor.encode_passage(g, p.reps, q_align, q_indep)?;
        let spans = enumerate_spans(input.passage.len(), self.config.max_span)?;
        let logits = self.rasor.span_logits(g, h, &spans)?;
        Ok(ModelOutput {
            spans,
            logits,
            passage_reps: p.reps,
            question_reps: q.reps,
            passage_gates: p.gates,
            question_gates: q.gates,
        })
    }

    /// Negative log-likelihood of `gold`.
    pub fn loss(&self, g: &mut Graph, input: &ModelInput, gold: SpanIndex) -> Result<Var> {
        let out = self.forward(g, input)?;
        Ok(span_loss(g, out.logits, &out.spans, gold)?)
    }

    /// Eval-mode span distribution.
    pub fn distribution(&self, store: &ParamStore, input: &ModelInput) -> Result<SpanDistribution> {
        let mut g = Graph::with_mode(store, Mode::Eval, 0);
        let out = self.forward(&mut g, input)?;
        Ok(score_spans(&mut g, out.logits, &out.spans)?)
    }

    pub fn predict(&self, store: &ParamStore, input: &ModelInput) -> Result<SpanIndex> {
        let dist = self.distribution(store, input)?;
        Ok(predict(&dist).expect("at least one candidate span"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare_examples, SquadExample};
    use crate::embedder::CharCnnConfig;

    fn tiny_config(variant: Option<Variant>) -> ModelConfig {
        ModelConfig {
            variant,
            word_dim: 4,
            char_cnn: CharCnnConfig {
                char_dim: 3,
                widths: vec![1, 2],
                filters_per_width: 2,
            },
            bilstm: BiLstmConfig {
                layers: 1,
                hidden: 2,
                input_dropout: 0.0,
                hidden_dropout: 0.0,
                variational: false,
            },
            mlp: MlpConfig {
                hidden: vec![3],
                dropout: 0.0,
            },
            d_f: 3,
            ff_dropout: 0.0,
            max_span: 30,
            word_dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    fn example() -> TokenizedExample {
        let raw = SquadExample {
            id: "e1".into(),
            context: "Paris is in France .".into(),
            question: "Where is Paris ?".into(),
            answers: vec![("France".into(), 12)],
        };
        let (ok, skipped) = prepare_examples(&[raw]);
        assert!(skipped.is_empty());
        ok.into_iter().next().unwrap()
    }

    fn build(variant: Option<Variant>) -> (ParamStore, QaModel, ModelInput) {
        let ex = example();
        let vocab = crate::data::build_vocab(std::slice::from_ref(&ex), 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let table = Tensor::uniform(&[vocab.len(), 4], 1.0, &mut rng);
        let mut store = ParamStore::new();
        let model = QaModel::new(&mut store, tiny_config(variant), table, 3).unwrap();
        let input = ModelInput::from_example(&ex, &vocab, None).unwrap();
        (store, model, input)
    }

    #[test]
    fn forward_yields_a_distribution_for_every_variant() {
        for v in [None, Some(Variant::Tr), Some(Variant::TrMlp)] {
            let (store, model, input) = build(v);
            let d = model.distribution(&store, &input).unwrap();
            assert_eq!(d.spans.len(), 15);
            assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(d.probs.iter().all(|&p| p > 0.0));
        }
    }

    #[test]
    fn word_table_is_frozen() {
        let (store, model, input) = build(Some(Variant::Tr));
        let mut g = Graph::new(&store);
        let loss = model.loss(&mut g, &input, (3, 3)).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.param(model.embedder.word_table).is_none());
        assert!(grads.param(model.rasor.w_c).is_some());
    }

    #[test]
    fn word_dropout_clears_surfaces() {
        let (_, _, input) = build(None);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all = input.word_dropout(0.999, &mut rng).unwrap();
        assert!(all.passage.ids.iter().all(|&i| i == Vocabulary::UNK));
        assert!(all.passage.surfaces.iter().all(String::is_empty));
        assert_eq!(input.word_dropout(0.0, &mut rng).unwrap(), input);
    }

    #[test]
    fn lm_variant_requires_states() {
        let (store, _, input) = build(None);
        let mut cfg = tiny_config(Some(Variant::TrLmL1));
        cfg.lm_dim = 2;
        let mut s2 = ParamStore::new();
        let table = Tensor::zeros(&[store.get(store.id("embed.words").unwrap()).shape[0], 4]);
        let model = QaModel::new(&mut s2, cfg, table, 0).unwrap();
        let mut g = Graph::new(&s2);
        assert!(matches!(model.forward(&mut g, &input), Err(Error::Config(_))));
    }
}

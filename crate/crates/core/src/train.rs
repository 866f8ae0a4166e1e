//! Minibatch training with periodic evaluation, best-checkpoint tracking
//! and early stopping.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{SquadExample, TokenizedExample};
use crate::error::Result;
use crate::eval::{evaluate, EvalResult};
use crate::model::{ModelInput, QaModel};
use crate::rasor::SpanIndex;
use crate::tensor::{adam_step, AdamConfig, AdamState, Gradients, Graph, Mode, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub batch_size: usize,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Stop after this many evaluations without a new best dev F1.
    pub patience: usize,
    /// Stop as soon as dev EM reaches this percentage.
    pub target_em: Option<f64>,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            batch_size: 80,
            max_steps: 50_000,
            eval_every: 500,
            patience: 5,
            target_em: None,
            adam: AdamConfig {
                round_to_f32: true,
                ..AdamConfig::default()
            },
            seed: 1,
        }
    }
}

/// One training example: model input plus its (first) gold span.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub input: ModelInput,
    pub gold: SpanIndex,
}

/// Examples to predict on, with the gold answers used for scoring.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub inputs: Vec<ModelInput>,
    pub examples: Vec<TokenizedExample>,
    pub golds: Vec<SquadExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub em: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub best_step: Option<usize>,
    pub best_em: Option<f64>,
    pub best_f1: Option<f64>,
    pub stopped_early: bool,
    pub reached_target: bool,
}

/// Seed for the `index`-th example of step `step`: fixes its dropout masks
/// independently of batch composition.
pub fn example_seed(seed: u64, step: usize, index: usize) -> u64 {
    let mut z = seed
        .wrapping_add((step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add((index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Predicted answer text per question id.
pub fn predict_all(model: &QaModel, store: &ParamStore, set: &EvalSet) -> Result<HashMap<String, String>> {
    let mut out = HashMap::with_capacity(set.inputs.len());
    for (input, ex) in set.inputs.iter().zip(&set.examples) {
        let (l, r) = model.predict(store, input)?;
        out.insert(ex.id.clone(), ex.span_text(l, r));
    }
    Ok(out)
}

pub fn evaluate_model(model: &QaModel, store: &ParamStore, set: &EvalSet) -> Result<EvalResult> {
    let preds = predict_all(model, store, set)?;
    Ok(evaluate(&set.golds, &preds))
}

/// Loss and gradients of one example in train mode.
pub fn example_gradients(model: &QaModel, store: &ParamStore, item: &TrainItem, seed: u64) -> Result<(f64, Gradients)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let input = if model.config.word_dropout > 0.0 {
        item.input.word_dropout(model.config.word_dropout, &mut rng)?
    } else {
        item.input.clone()
    };
    let mut g = Graph::with_mode(store, Mode::Train, seed ^ 0x00d1_ce5e);
    let loss = model.loss(&mut g, &input, item.gold)?;
    let value = g.value(loss)[0];
    Ok((value, g.backward(loss)?))
}

/// Runs training. `on_log` receives every step (with scores on evaluation
/// steps); `on_best` is called with the parameters whenever dev F1 improves.
pub fn train<L, B>(
    model: &QaModel,
    store: &mut ParamStore,
    items: &[TrainItem],
    dev: Option<&EvalSet>,
    opts: &TrainOptions,
    mut on_log: L,
    mut on_best: B,
) -> Result<TrainSummary>
where
    L: FnMut(&LogEntry),
    B: FnMut(&ParamStore, &EvalResult) -> Result<()>,
{
    assert!(opts.batch_size >= 1, "batch size must be positive");
    let mut adam = AdamState::new(store, opts.adam);
    let mut summary = TrainSummary {
        steps: 0,
        best_step: None,
        best_em: None,
        best_f1: None,
        stopped_early: false,
        reached_target: false,
    };
    if items.is_empty() {
        return Ok(summary);
    }
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut epoch = 0u64;
    let mut since_best = 0;
    while summary.steps < opts.max_steps {
        if cursor >= order.len() {
            order = (0..items.len()).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(epoch)));
            epoch += 1;
            cursor = 0;
        }
        let end = (cursor + opts.batch_size).min(order.len());
        let batch = &order[cursor..end];
        cursor = end;
        let step = summary.steps + 1;

        let mut acc = Gradients::zeros(store);
        let mut loss_sum = 0.0;
        for (k, &i) in batch.iter().enumerate() {
            let (loss, grads) = example_gradients(model, store, &items[i], example_seed(opts.seed, step, k))?;
            loss_sum += loss;
            acc.accumulate(&grads);
        }
        acc.scale(1.0 / batch.len() as f64);
        adam_step(store, &acc, &mut adam)?;
        summary.steps = step;

        let mut entry = LogEntry {
            step,
            loss: loss_sum / batch.len() as f64,
            em: None,
            f1: None,
        };
        let due = opts.eval_every > 0 && step.is_multiple_of(opts.eval_every);
        if let (Some(set), true) = (dev, due || step == opts.max_steps) {
            let result = evaluate_model(model, store, set)?;
            entry.em = Some(result.em);
            entry.f1 = Some(result.f1);
            on_log(&entry);
            if summary.best_f1.is_none_or(|b| result.f1 > b) {
                summary.best_f1 = Some(result.f1);
                summary.best_em = Some(result.em);
                summary.best_step = Some(step);
                since_best = 0;
                on_best(store, &result)?;
            } else {
                since_best += 1;
            }
            if opts.target_em.is_some_and(|t| result.em >= t) {
                summary.reached_target = true;
                break;
            }
            if opts.patience > 0 && since_best >= opts.patience {
                summary.stopped_early = true;
                break;
            }
        } else {
            on_log(&entry);
        }
    }
    Ok(summary)
}

//! Span-extraction reader: question summary by attention, passage-aligned
//! question attention, augmented passage encoding, and a softmax over all
//! candidate spans up to a maximum length.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{fan_in_init, BiLstm, BiLstmConfig, FeedForward};
use crate::error::TensorError;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

type R<T> = Result<T, TensorError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RasorConfig {
    pub d_f: usize,
    pub ff_dropout: f64,
    pub max_span: usize,
    pub bilstm: BiLstmConfig,
}

impl Default for RasorConfig {
    fn default() -> Self {
        RasorConfig {
            d_f: 100,
            ff_dropout: 0.2,
            max_span: 30,
            bilstm: BiLstmConfig::default(),
        }
    }
}

/// 0-based inclusive token span.
pub type SpanIndex = (usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct SpanDistribution {
    pub spans: Vec<SpanIndex>,
    pub probs: Vec<f64>,
}

impl SpanDistribution {
    pub fn index_of(&self, span: SpanIndex) -> Option<usize> {
        self.spans.iter().position(|&s| s == span)
    }
}

#[derive(Debug, Clone)]
pub struct Rasor {
    pub config: RasorConfig,
    pub word_dim: usize,
    pub question_lstm: BiLstm,
    pub question_ff: FeedForward,
    pub w_q: ParamId,
    pub align_ff_question: FeedForward,
    pub align_ff_passage: FeedForward,
    pub passage_lstm: BiLstm,
    /// The span FF acts on `[h_l; h_r]`; its weight is stored as the two
    /// halves so the per-position products can be shared across spans.
    pub span_w_left: ParamId,
    pub span_w_right: ParamId,
    pub span_b: ParamId,
    pub w_c: ParamId,
}

impl Rasor {
    pub fn new<G: Rng>(store: &mut ParamStore, prefix: &str, word_dim: usize, config: RasorConfig, rng: &mut G) -> Self {
        let d_f = config.d_f;
        let dh2 = 2 * config.bilstm.hidden;
        let drop = config.ff_dropout;
        let question_lstm = BiLstm::new(store, &format!("{prefix}.question_lstm"), word_dim, config.bilstm.clone(), rng);
        let question_ff = FeedForward::new(store, &format!("{prefix}.question_ff"), dh2, d_f, drop, rng);
        let w_q = store.add(format!("{prefix}.w_q"), fan_in_init(&[d_f, 1], rng));
        let align_ff_question = FeedForward::new(store, &format!("{prefix}.align_ff_question"), word_dim, d_f, drop, rng);
        let align_ff_passage = FeedForward::new(store, &format!("{prefix}.align_ff_passage"), word_dim, d_f, drop, rng);
        let passage_lstm = BiLstm::new(store, &format!("{prefix}.passage_lstm"), 2 * word_dim + dh2, config.bilstm.clone(), rng);
        // Both halves share the fan-in of the full `[h_l; h_r]` input.
        let bound = 1.0 / ((2 * dh2) as f64).sqrt();
        let span_w_left = store.add(format!("{prefix}.span_ff.w_left"), Tensor::uniform(&[dh2, d_f], bound, rng));
        let span_w_right = store.add(format!("{prefix}.span_ff.w_right"), Tensor::uniform(&[dh2, d_f], bound, rng));
        let span_b = store.add(format!("{prefix}.span_ff.b"), Tensor::zeros(&[d_f]));
        let w_c = store.add(format!("{prefix}.w_c"), fan_in_init(&[d_f, 1], rng));
        Rasor {
            config,
            word_dim,
            question_lstm,
            question_ff,
            w_q,
            align_ff_question,
            align_ff_passage,
            passage_lstm,
            span_w_left,
            span_w_right,
            span_b,
            w_c,
        }
    }

    /// Attention pooling of `v` (`m x 2d_h`): returns `(q_indep` as
    /// `1 x 2d_h`, attention weights `1 x m)`.
    pub fn attend_indep(&self, g: &mut Graph, v: Var) -> R<(Var, Var)> {
        let (m, _) = g.dims2(v);
        if m == 0 {
            return Err(TensorError::arg("question_indep", "empty question"));
        }
        let hidden = self.question_ff.forward(g, v)?;
        let w_q = g.param(self.w_q);
        let s = g.matmul(hidden, w_q)?;
        let s = g.transpose(s)?;
        let alpha = g.softmax(s)?;
        let q = g.matmul(alpha, v)?;
        Ok((q, alpha))
    }

    /// Question BiLSTM followed by attention pooling.
    pub fn question_indep(&self, g: &mut Graph, question: Var) -> R<(Var, Var)> {
        if g.dims2(question).0 == 0 {
            return Err(TensorError::arg("question_indep", "empty question"));
        }
        let v = self.question_lstm.forward_top(g, question)?;
        self.attend_indep(g, v)
    }

    /// For each passage row, a softmax-weighted sum of question rows.
    /// Returns `(q_align` `n x d_w`, weights `n x m)`.
    pub fn question_aligned(&self, g: &mut Graph, passage: Var, question: Var) -> R<(Var, Var)> {
        let (n, _) = g.dims2(passage);
        let (m, _) = g.dims2(question);
        if n == 0 || m == 0 {
            return Err(TensorError::arg("question_aligned", "empty passage or question"));
        }
        let fp = self.align_ff_passage.forward(g, passage)?;
        let fq = self.align_ff_question.forward(g, question)?;
        let fq_t = g.transpose(fq)?;
        let s = g.matmul(fp, fq_t)?;
        let beta = g.softmax(s)?;
        let q_align = g.matmul(beta, question)?;
        Ok((q_align, beta))
    }

    /// `p*_i = [p_i; q_align_i; q_indep]` through the passage BiLSTM.
    pub fn encode_passage(&self, g: &mut Graph, passage: Var, q_align: Var, q_indep: Var) -> R<Var> {
        let (n, _) = g.dims2(passage);
        if g.dims2(q_align).0 != n {
            return Err(TensorError::dim("encode_passage", g.shape(passage), g.shape(q_align)));
        }
        if g.dims2(q_indep).0 != 1 {
            return Err(TensorError::dim("encode_passage", g.shape(q_indep), &[1, 2 * self.config.bilstm.hidden]));
        }
        let qi = g.broadcast_rows(q_indep, n)?;
        let p_star = g.concat(&[passage, q_align, qi], 1)?;
        self.passage_lstm.forward_top(g, p_star)
    }

    /// Span logits as a `1 x K` row, one per entry of `spans`.
    pub fn span_logits(&self, g: &mut Graph, h: Var, spans: &[SpanIndex]) -> R<Var> {
        let (n, _) = g.dims2(h);
        if let Some(&(l, r)) = spans.iter().find(|&&(l, r)| l > r || r >= n) {
            return Err(TensorError::arg("score_spans", format!("span ({l}, {r}) is invalid for {n} tokens")));
        }
        if spans.is_empty() {
            return Err(TensorError::arg("score_spans", "no candidate spans"));
        }
        let wl = g.param(self.span_w_left);
        let wr = g.param(self.span_w_right);
        let b = g.param(self.span_b);
        let left = g.matmul(h, wl)?;
        let left = g.add_bias(left, b)?;
        let right = g.matmul(h, wr)?;
        let ls: Vec<usize> = spans.iter().map(|s| s.0).collect();
        let rs: Vec<usize> = spans.iter().map(|s| s.1).collect();
        let gl = g.gather_rows(left, &ls)?;
        let gr = g.gather_rows(right, &rs)?;
        let pre = g.add(gl, gr)?;
        let hidden = g.relu(pre);
        let hidden = g.dropout(hidden, self.config.ff_dropout)?;
        let w_c = g.param(self.w_c);
        let s = g.matmul(hidden, w_c)?;
        g.transpose(s)
    }
}

/// All `(l, r)` with `l <= r < n` and `r - l + 1 <= max_len`, ordered by
/// `l` then `r`.
pub fn enumerate_spans(n: usize, max_len: usize) -> R<Vec<SpanIndex>> {
    if n == 0 {
        return Err(TensorError::arg("enumerate_spans", "sequence length must be at least 1"));
    }
    if max_len == 0 {
        return Err(TensorError::arg("enumerate_spans", "max_len must be at least 1"));
    }
    let mut out = Vec::new();
    for l in 0..n {
        for r in l..n.min(l + max_len) {
            out.push((l, r));
        }
    }
    Ok(out)
}

/// Softmax over the span logits.
pub fn score_spans(g: &mut Graph, logits: Var, spans: &[SpanIndex]) -> R<SpanDistribution> {
    if g.dims2(logits) != (1, spans.len()) {
        return Err(TensorError::dim("score_spans", g.shape(logits), &[1, spans.len()]));
    }
    let p = g.softmax(logits)?;
    Ok(SpanDistribution {
        spans: spans.to_vec(),
        probs: g.value(p).to_vec(),
    })
}

/// Negative log-probability of the gold span.
pub fn span_loss(g: &mut Graph, logits: Var, spans: &[SpanIndex], gold: SpanIndex) -> R<Var> {
    let idx = spans
        .iter()
        .position(|&s| s == gold)
        .ok_or_else(|| TensorError::arg("loss", format!("gold span {gold:?} is not a candidate")))?;
    g.cross_entropy(logits, idx)
}

/// Highest-probability span; ties go to the smallest `(l, r)`.
pub fn predict(dist: &SpanDistribution) -> Option<SpanIndex> {
    let mut best: Option<(SpanIndex, f64)> = None;
    for (&s, &p) in dist.spans.iter().zip(&dist.probs) {
        let better = match best {
            None => true,
            Some((bs, bp)) => p > bp || (p == bp && s < bs),
        };
        if better {
            best = Some((s, p));
        }
    }
    best.map(|b| b.0)
}

//! Highway re-embedding of word vectors: `w' = g*w + (1-g)*z` with the gate
//! and transform computed from the token's own features `x` and a context
//! vector `u`. Also gate-activation bookkeeping per word type.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedder::Vocabulary;
use crate::encoders::{fan_in_init, BiLstm, BiLstmConfig, Mlp, MlpConfig};
use crate::error::{Error, Result, TensorError};
use crate::lm::LmLayer;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "tr")]
    Tr,
    #[serde(rename = "tr-mlp")]
    TrMlp,
    #[serde(rename = "tr-lm-emb")]
    TrLmEmb,
    #[serde(rename = "tr-lm-l1")]
    TrLmL1,
    #[serde(rename = "tr-lm-l2")]
    TrLmL2,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Tr, Variant::TrMlp, Variant::TrLmEmb, Variant::TrLmL1, Variant::TrLmL2];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Tr => "tr",
            Variant::TrMlp => "tr-mlp",
            Variant::TrLmEmb => "tr-lm-emb",
            Variant::TrLmL1 => "tr-lm-l1",
            Variant::TrLmL2 => "tr-lm-l2",
        }
    }

    /// The LM layer a `TR+LM` variant consumes.
    pub fn lm_layer(self) -> Option<LmLayer> {
        match self {
            Variant::TrLmEmb => Some(LmLayer::Emb),
            Variant::TrLmL1 => Some(LmLayer::L1),
            Variant::TrLmL2 => Some(LmLayer::L2),
            Variant::Tr | Variant::TrMlp => None,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('_', "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (expected tr, tr-mlp, tr-lm-emb, tr-lm-l1 or tr-lm-l2)")))
    }
}

/// Test hook: replaces the computed gate by a constant.
#[cfg(feature = "test-hooks")]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateOverride {
    Ones,
    Zeros,
}

#[derive(Debug, Clone)]
pub enum ContextEncoder {
    BiLstm(BiLstm),
    Mlp(Mlp),
}

#[derive(Debug, Clone)]
pub struct ReembedderParams {
    pub variant: Variant,
    pub context: ContextEncoder,
    pub w_g: ParamId,
    pub u_g: ParamId,
    pub b_g: Option<ParamId>,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: Option<ParamId>,
    pub x_dim: usize,
    pub u_dim: usize,
    pub word_dim: usize,
    pub lm_dim: usize,
    #[cfg(feature = "test-hooks")]
    pub gate_override: Option<GateOverride>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReembedConfig {
    pub variant: Variant,
    pub bilstm: BiLstmConfig,
    pub mlp: MlpConfig,
    /// Include the `b_g`, `b_z` bias vectors.
    pub bias: bool,
}

/// Re-embedded words and the gate activations that produced them.
#[derive(Debug, Clone, Copy)]
pub struct Reembedded {
    pub words: Var,
    pub gates: Var,
}

impl ReembedderParams {
    /// `x_dim` is `d_w + d_c`; `lm_dim` must be non-zero exactly for LM variants.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        config: &ReembedConfig,
        x_dim: usize,
        word_dim: usize,
        lm_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let variant = config.variant;
        match (variant.lm_layer(), lm_dim) {
            (Some(_), 0) => return Err(Error::Config(format!("variant {variant} needs lm states"))),
            (None, d) if d > 0 => return Err(Error::Config(format!("variant {variant} takes no lm states"))),
            _ => {}
        }
        let context_dim = 2 * config.bilstm.hidden;
        let context = match variant {
            Variant::TrMlp => ContextEncoder::Mlp(Mlp::new(store, &format!("{prefix}.mlp"), x_dim, context_dim, &config.mlp, rng)),
            _ => ContextEncoder::BiLstm(BiLstm::new(store, &format!("{prefix}.bilstm"), x_dim, config.bilstm.clone(), rng)),
        };
        let u_dim = context_dim + lm_dim;
        let mut mat = |name: &str, rows: usize| store.add(format!("{prefix}.{name}"), fan_in_init(&[rows, word_dim], rng));
        let w_g = mat("w_g", x_dim);
        let u_g = mat("u_g", u_dim);
        let w_z = mat("w_z", x_dim);
        let u_z = mat("u_z", u_dim);
        let (b_g, b_z) = if config.bias {
            (
                Some(store.add(format!("{prefix}.b_g"), Tensor::zeros(&[word_dim]))),
                Some(store.add(format!("{prefix}.b_z"), Tensor::zeros(&[word_dim]))),
            )
        } else {
            (None, None)
        };
        Ok(ReembedderParams {
            variant,
            context,
            w_g,
            u_g,
            b_g,
            w_z,
            u_z,
            b_z,
            x_dim,
            u_dim,
            word_dim,
            lm_dim,
            #[cfg(feature = "test-hooks")]
            gate_override: None,
        })
    }

    /// Context vectors `u_t` for one sequence `x` (`n x x_dim`). LM variants
    /// take the selected layer's states (`n x lm_dim`) and append them.
    pub fn compute_context(&self, g: &mut Graph, x: Var, lm: Option<&Tensor>, example_id: &str) -> Result<Var> {
        let (n, _) = g.dims2(x);
        let base = match &self.context {
            ContextEncoder::BiLstm(enc) => enc.forward_top(g, x)?,
            ContextEncoder::Mlp(mlp) => mlp.forward(g, x)?,
        };
        match (self.variant.lm_layer(), lm) {
            (None, None) => Ok(base),
            (None, Some(_)) => Err(Error::Config(format!("variant {} takes no lm states", self.variant))),
            (Some(_), None) => Err(Error::Config(format!("variant {} needs lm states", self.variant))),
            (Some(_), Some(states)) => {
                let (rows, cols) = states.dims2();
                if rows != n {
                    return Err(Error::Alignment {
                        example_id: example_id.to_string(),
                        msg: format!("sequence has {n} tokens but lm states cover {rows}"),
                    });
                }
                if cols != self.lm_dim {
                    return Err(TensorError::dim("compute_context", &states.shape, &[n, self.lm_dim]).into());
                }
                let o = g.input(states.clone().with_grad(false));
                Ok(g.concat(&[base, o], 1)?)
            }
        }
    }

    fn gate_input(&self, g: &mut Graph, x: Var, u: Var, w: ParamId, uw: ParamId, b: Option<ParamId>) -> Result<Var, TensorError> {
        let w = g.param(w);
        let uw = g.param(uw);
        let a = g.matmul(x, w)?;
        let c = g.matmul(u, uw)?;
        let s = g.add(a, c)?;
        match b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(s, b)
            }
            None => Ok(s),
        }
    }

    /// `w'_t = g_t*w_t + (1-g_t)*z_t` for every row.
    pub fn reembed(&self, g: &mut Graph, x: Var, w: Var, u: Var) -> Result<Reembedded, TensorError> {
        let (n, xd) = g.dims2(x);
        if xd != self.x_dim {
            return Err(TensorError::dim("reembed", g.shape(x), &[n, self.x_dim]));
        }
        if g.dims2(w) != (n, self.word_dim) {
            return Err(TensorError::dim("reembed", g.shape(w), &[n, self.word_dim]));
        }
        if g.dims2(u) != (n, self.u_dim) {
            return Err(TensorError::dim("reembed", g.shape(u), &[n, self.u_dim]));
        }
        let gate_pre = self.gate_input(g, x, u, self.w_g, self.u_g, self.b_g)?;
        #[allow(unused_mut)]
        let mut gates = g.sigmoid(gate_pre);
        #[cfg(feature = "test-hooks")]
        if let Some(o) = self.gate_override {
            let v = if o == GateOverride::Ones { 1.0 } else { 0.0 };
            gates = g.input(Tensor::filled(&[n, self.word_dim], v));
        }
        let z_pre = self.gate_input(g, x, u, self.w_z, self.u_z, self.b_z)?;
        let z = g.tanh(z_pre);
        Ok(Reembedded {
            words: highway(g, gates, w, z)?,
            gates,
        })
    }
}

/// `gate*carry + (1-gate)*transform`.
pub fn highway(g: &mut Graph, gate: Var, carry: Var, transform: Var) -> Result<Var, TensorError> {
    let kept = g.mul(gate, carry)?;
    let rest = g.one_minus(gate);
    let mixed = g.mul(rest, transform)?;
    g.add(kept, mixed)
}

const FIXED_SCALE: f64 = (1u64 << 60) as f64;

/// Per-type gate means. Each occurrence contributes the mean of its gate
/// vector; sums are kept in fixed point so the result does not depend on
/// the order occurrences were recorded in.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct GateStats {
    entries: BTreeMap<usize, (u128, u64)>,
}

impl GateStats {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn record(&mut self, token_id: usize, gate: &[f64]) {
        let mean = gate.iter().sum::<f64>() / gate.len().max(1) as f64;
        let fixed = (mean.clamp(0.0, 1.0) * FIXED_SCALE).round() as u128;
        let e = self.entries.entry(token_id).or_insert((0, 0));
        e.0 += fixed;
        e.1 += 1;
    }

    pub fn merge(&mut self, other: &GateStats) {
        for (&id, &(s, c)) in &other.entries {
            let e = self.entries.entry(id).or_insert((0, 0));
            e.0 += s;
            e.1 += c;
        }
    }

    pub fn mean(&self, token_id: usize) -> Option<f64> {
        self.entries
            .get(&token_id)
            .map(|&(s, c)| (s as f64 / FIXED_SCALE) / c as f64)
    }

    pub fn occurrences(&self, token_id: usize) -> u64 {
        self.entries.get(&token_id).map_or(0, |e| e.1)
    }

    /// `(token id, mean gate)` in id order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.entries.keys().map(|&id| (id, self.mean(id).expect("present")))
    }
}

/// Adds one sequence's gates (`n x d_w`, one row per token) to `stats`.
pub fn record_gate_stats(gates: &Tensor, token_ids: &[usize], stats: &mut GateStats) -> Result<(), TensorError> {
    let (n, _) = gates.dims2();
    if n != token_ids.len() {
        return Err(TensorError::dim("record_gate_stats", &gates.shape, &[token_ids.len()]));
    }
    for (i, &id) in token_ids.iter().enumerate() {
        stats.record(id, gates.row(i));
    }
    Ok(())
}

/// One CSV row per observed type, most frequent first (ties by word).
pub fn gate_rows<'v>(stats: &GateStats, vocab: &'v Vocabulary) -> Vec<(&'v str, u64, f64)> {
    let mut rows: Vec<_> = stats
        .iter()
        .map(|(id, m)| (vocab.token(id), vocab.frequency(id), m))
        .collect();
    rows.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    rows
}

/// Writes a `# split=... config=...` metadata line, the header
/// `word_type,frequency,mean_gate`, then [`gate_rows`].
pub fn export_gate_csv<W: Write>(stats: &GateStats, vocab: &Vocabulary, split: &str, config_json: &str, out: W) -> Result<()> {
    if stats.is_empty() {
        return Err(Error::Config("no gate activations were recorded".into()));
    }
    let io = |e: std::io::Error| Error::io("<gate csv>", e);
    let mut out = out;
    writeln!(out, "# split={split} config={config_json}").map_err(io)?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::io("<gate csv>", std::io::Error::other(e.to_string()));
    w.write_record(["word_type", "frequency", "mean_gate"]).map_err(csv_err)?;
    for (word, freq, mean) in gate_rows(stats, vocab) {
        w.write_record([word.to_string(), freq.to_string(), format!("{mean:.6}")]).map_err(csv_err)?;
    }
    w.flush().map_err(io)
}

/// Spearman rank correlation between type frequency and mean gate.
pub fn frequency_gate_correlation(stats: &GateStats, vocab: &Vocabulary) -> Option<f64> {
    let rows = gate_rows(stats, vocab);
    if rows.len() < 2 {
        return None;
    }
    let freq = ranks(&rows.iter().map(|r| r.1 as f64).collect::<Vec<_>>());
    let gate = ranks(&rows.iter().map(|r| r.2).collect::<Vec<_>>());
    pearson(&freq, &gate)
}

/// Average ranks (ties share the mean rank).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

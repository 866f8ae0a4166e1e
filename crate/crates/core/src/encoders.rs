//! Sequence encoders: coupled-gate LSTM, stacked BiLSTM, and the
//! position-wise feed-forward nets (single-layer FF and the deeper MLP).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::TensorError;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

type R<T> = Result<T, TensorError>;

/// Uniform in `[-1/sqrt(d), 1/sqrt(d)]`, `d` being the receiving (input)
/// dimension, i.e. the first axis of an `in x out` matrix.
pub fn fan_in_init<G: Rng>(shape: &[usize], rng: &mut G) -> Tensor {
    let d = shape[0].max(1) as f64;
    Tensor::uniform(shape, 1.0 / d.sqrt(), rng)
}

/// Affine map `x W + b` applied to every row.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<G: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut G) -> Self {
        Dense {
            w: store.add(format!("{name}.w"), fan_in_init(&[in_dim, out_dim], rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> R<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

/// Single hidden layer with ReLU and dropout on the activations.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub layer: Dense,
    pub dropout: f64,
}

impl FeedForward {
    pub fn new<G: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize, dropout: f64, rng: &mut G) -> Self {
        FeedForward {
            layer: Dense::new(store, name, in_dim, hidden, rng),
            dropout,
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> R<Var> {
        let h = self.layer.forward(g, x)?;
        let h = g.relu(h);
        g.dropout(h, self.dropout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub dropout: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: vec![865, 865, 400],
            dropout: 0.2,
        }
    }
}

/// ReLU hidden layers followed by a linear output layer. Position-wise:
/// row `t` of the output depends only on row `t` of the input.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Vec<Dense>,
    pub output: Dense,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<G: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, config: &MlpConfig, rng: &mut G) -> Self {
        let mut hidden = Vec::new();
        let mut d = in_dim;
        for (i, &h) in config.hidden.iter().enumerate() {
            hidden.push(Dense::new(store, &format!("{name}.hidden{i}"), d, h, rng));
            d = h;
        }
        Mlp {
            hidden,
            output: Dense::new(store, &format!("{name}.out"), d, out_dim, rng),
            dropout: config.dropout,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> R<Var> {
        let (_, c) = g.dims2(x);
        let expected = self.hidden.first().unwrap_or(&self.output).in_dim;
        if c != expected {
            return Err(TensorError::dim("mlp_forward", g.shape(x), &[expected]));
        }
        let mut h = x;
        for layer in &self.hidden {
            h = layer.forward(g, h)?;
            h = g.relu(h);
            h = g.dropout(h, self.dropout)?;
        }
        self.output.forward(g, h)
    }
}

/// LSTM cell with the forget gate tied to `1 - input gate`. Pre-activations
/// are laid out `[input | output | candidate]`.
#[derive(Debug, Clone)]
pub struct LstmCell {
    pub w: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct LstmStep {
    pub h: Var,
    pub c: Var,
    pub input_gate: Var,
    pub forget_gate: Var,
}

impl LstmCell {
    pub fn new<G: Rng>(store: &mut ParamStore, name: &str, input_dim: usize, hidden: usize, rng: &mut G) -> Self {
        LstmCell {
            w: store.add(format!("{name}.w"), fan_in_init(&[input_dim, 3 * hidden], rng)),
            u: store.add(format!("{name}.u"), fan_in_init(&[hidden, 3 * hidden], rng)),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[3 * hidden])),
            input_dim,
            hidden,
        }
    }

    /// One step from a raw input row `x_t` (`1 x input_dim`).
    pub fn step(&self, g: &mut Graph, x_t: Var, h_prev: Option<Var>, c_prev: Option<Var>) -> R<LstmStep> {
        if g.dims2(x_t) != (1, self.input_dim) {
            return Err(TensorError::dim("lstm_step", g.shape(x_t), &[1, self.input_dim]));
        }
        for prev in [h_prev, c_prev].into_iter().flatten() {
            if g.dims2(prev) != (1, self.hidden) {
                return Err(TensorError::dim("lstm_step", g.shape(prev), &[1, self.hidden]));
            }
        }
        let w = g.param(self.w);
        let b = g.param(self.b);
        let proj = g.matmul(x_t, w)?;
        let proj = g.add_bias(proj, b)?;
        self.step_projected(g, proj, h_prev, c_prev)
    }

    /// Step given the already-computed `x_t W + b`. `None` states are zero.
    fn step_projected(&self, g: &mut Graph, proj: Var, h_prev: Option<Var>, c_prev: Option<Var>) -> R<LstmStep> {
        let d = self.hidden;
        let pre = match h_prev {
            Some(h) => {
                let u = g.param(self.u);
                let rec = g.matmul(h, u)?;
                g.add(proj, rec)?
            }
            None => proj,
        };
        let gates_pre = g.slice_cols(pre, 0, 2 * d)?;
        let gates = g.sigmoid(gates_pre);
        let input_gate = g.slice_cols(gates, 0, d)?;
        let output_gate = g.slice_cols(gates, d, d)?;
        let cand_pre = g.slice_cols(pre, 2 * d, d)?;
        let cand = g.tanh(cand_pre);
        let forget_gate = g.one_minus(input_gate);
        let write = g.mul(input_gate, cand)?;
        let c = match c_prev {
            Some(c_prev) => {
                let keep = g.mul(forget_gate, c_prev)?;
                g.add(keep, write)?
            }
            None => write,
        };
        let squashed = g.tanh(c);
        let h = g.mul(output_gate, squashed)?;
        Ok(LstmStep {
            h,
            c,
            input_gate,
            forget_gate,
        })
    }

    /// Runs over the rows of `xs` (`n x input_dim`), right-to-left when
    /// `reverse`. Output rows stay in input position order.
    pub fn run(&self, g: &mut Graph, xs: Var, reverse: bool) -> R<Var> {
        let (n, c) = g.dims2(xs);
        if c != self.input_dim {
            return Err(TensorError::dim("lstm", g.shape(xs), &[n, self.input_dim]));
        }
        let w = g.param(self.w);
        let b = g.param(self.b);
        let proj = g.matmul(xs, w)?;
        let proj = g.add_bias(proj, b)?;
        let mut hs = vec![None; n];
        let mut state: (Option<Var>, Option<Var>) = (None, None);
        let order: Vec<usize> = if reverse { (0..n).rev().collect() } else { (0..n).collect() };
        for t in order {
            let p = g.row(proj, t)?;
            let step = self.step_projected(g, p, state.0, state.1)?;
            hs[t] = Some(step.h);
            state = (Some(step.h), Some(step.c));
        }
        let hs: Vec<Var> = hs.into_iter().map(|h| h.expect("every position visited")).collect();
        g.concat(&hs, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiLstmConfig {
    pub layers: usize,
    pub hidden: usize,
    pub input_dropout: f64,
    pub hidden_dropout: f64,
    /// Share one dropout mask across time steps instead of drawing per step.
    pub variational: bool,
}

impl Default for BiLstmConfig {
    fn default() -> Self {
        BiLstmConfig {
            layers: 2,
            hidden: 200,
            input_dropout: 0.6,
            hidden_dropout: 0.1,
            variational: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BiLstm {
    pub config: BiLstmConfig,
    pub input_dim: usize,
    /// `(forward, backward)` cells per layer.
    pub layers: Vec<(LstmCell, LstmCell)>,
}

impl BiLstm {
    pub fn new<G: Rng>(store: &mut ParamStore, name: &str, input_dim: usize, config: BiLstmConfig, rng: &mut G) -> Self {
        assert!(config.layers >= 1, "a BiLSTM needs at least one layer");
        let mut layers = Vec::with_capacity(config.layers);
        let mut d = input_dim;
        for l in 0..config.layers {
            let fwd = LstmCell::new(store, &format!("{name}.l{l}.fwd"), d, config.hidden, rng);
            let bwd = LstmCell::new(store, &format!("{name}.l{l}.bwd"), d, config.hidden, rng);
            layers.push((fwd, bwd));
            d = 2 * config.hidden;
        }
        BiLstm {
            config,
            input_dim,
            layers,
        }
    }

    pub fn out_dim(&self) -> usize {
        2 * self.config.hidden
    }

    fn drop(&self, g: &mut Graph, x: Var, rate: f64) -> R<Var> {
        if self.config.variational {
            g.dropout_shared_rows(x, rate)
        } else {
            g.dropout(x, rate)
        }
    }

    /// Every layer's `n x 2h` output, bottom first; each row is
    /// `[forward state; backward state]`.
    pub fn forward(&self, g: &mut Graph, xs: Var) -> R<Vec<Var>> {
        let (n, _) = g.dims2(xs);
        if g.shape(xs).len() != 2 || n == 0 {
            return Err(TensorError::arg("bilstm_forward", format!("expected a non-empty sequence, got shape {:?}", g.shape(xs))));
        }
        let mut input = self.drop(g, xs, self.config.input_dropout)?;
        let mut outputs = Vec::with_capacity(self.layers.len());
        for (fwd, bwd) in &self.layers {
            let hf = fwd.run(g, input, false)?;
            let hb = bwd.run(g, input, true)?;
            let both = g.concat(&[hf, hb], 1)?;
            let both = self.drop(g, both, self.config.hidden_dropout)?;
            outputs.push(both);
            input = both;
        }
        Ok(outputs)
    }

    pub fn forward_top(&self, g: &mut Graph, xs: Var) -> R<Var> {
        Ok(*self.forward(g, xs)?.last().expect("at least one layer"))
    }
}

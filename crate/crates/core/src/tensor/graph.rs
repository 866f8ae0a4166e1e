//! Tape-based reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so the tape index is already a
//! topological order and backward is a single reverse sweep.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::kernels::{self, dot, matmul_a_bt_into, matmul_at_b_into, matmul_into, sigmoid};
use super::{as_matrix, check_rate, dropout_mask, ParamId, ParamStore, Tensor};
use crate::error::TensorError;

type OpResult = Result<Var, TensorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRowBias(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    CrossEntropy { logits: Var, target: usize, probs: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    SliceRows { src: Var, start: usize },
    SliceCols { src: Var, start: usize },
    GatherRows { src: Var, rows: Vec<usize> },
    BroadcastRows(Var),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    MaxRows { src: Var, argmax: Vec<usize> },
    Mask { src: Var, mask: Vec<f64> },
    #[cfg(feature = "test-hooks")]
    CorruptedIdentity(Var),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    /// Empty for parameter leaves, whose values live in the store.
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// One computation graph. Parameters are borrowed from the store rather
/// than copied, and looked up once per graph.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    mode: Mode,
    rng: ChaCha8Rng,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self::with_mode(params, Mode::Eval, 0)
    }

    /// `seed` drives every dropout mask drawn through this graph.
    pub fn with_mode(params: &'p ParamStore, mode: Mode, seed: u64) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn dims2(&self, v: Var) -> (usize, usize) {
        as_matrix(&self.nodes[v.0].shape)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.params.get(id).data,
            _ => &self.nodes[v.0].value,
        }
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.shape(v).to_vec(),
            data: self.value(v).to_vec(),
            requires_grad: self.nodes[v.0].requires_grad,
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert!(matches!(op, Op::Param(_)) || shape.iter().product::<usize>() == value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant input. Gradients are still tracked when the tensor's
    /// `requires_grad` flag is set, so tests can differentiate w.r.t. inputs.
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad;
        self.push(t.shape, t.data, Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> OpResult {
        let t = Tensor::new(shape, data)?;
        Ok(self.input(t))
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let t = self.params.get(id);
        let v = self.push(t.shape.clone(), Vec::new(), Op::Param(id), t.requires_grad);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> OpResult {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), m, k, n, &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> OpResult {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> OpResult {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Adds a length-`c` bias vector to every row of an `r x c` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> OpResult {
        let (_, c) = self.dims2(x);
        if self.shape(bias) != [c] {
            return Err(TensorError::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c.max(1)) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRowBias(x, bias), rg))
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let out = self.value(x).iter().map(|v| scale * v + shift).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Affine(x, scale), rg)
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        self.affine(x, -1.0, 1.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Relu(x), rg)
    }

    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> OpResult {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(TensorError::arg(
                "elementwise",
                format!("{op:?} takes {arity} inputs, got {}", inputs.len()),
            ));
        }
        match op {
            Elementwise::Add => self.add(inputs[0], inputs[1]),
            Elementwise::Mul => self.mul(inputs[0], inputs[1]),
            Elementwise::Sigmoid => Ok(self.sigmoid(inputs[0])),
            Elementwise::Tanh => Ok(self.tanh(inputs[0])),
            Elementwise::Relu => Ok(self.relu(inputs[0])),
        }
    }

    /// Row-wise softmax; a vector is a single row.
    pub fn softmax(&mut self, x: Var) -> OpResult {
        let (r, c) = self.dims2(x);
        if c == 0 {
            return Err(TensorError::arg("softmax", "empty input"));
        }
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            kernels::softmax_row(&xv[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(self.shape(x).to_vec(), out, Op::SoftmaxRows(x), rg))
    }

    /// `-log softmax(logits)[target]` for a single row of logits.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> OpResult {
        let (r, c) = self.dims2(logits);
        if r != 1 || c == 0 {
            return Err(TensorError::arg("cross_entropy", format!("expected one row of logits, got {:?}", self.shape(logits))));
        }
        if target >= c {
            return Err(TensorError::arg("cross_entropy", format!("target {target} out of range for {c} classes")));
        }
        let xv = self.value(logits);
        let max = xv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = xv.iter().map(|v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        let loss = lse - xv[target];
        let probs = xv.iter().map(|v| (v - lse).exp()).collect();
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            rg,
        ))
    }

    /// Concatenates along `axis` (0 = rows, 1 = columns for matrices; vectors
    /// only support axis 0). Tensors with no elements are skipped.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> OpResult {
        let live: Vec<Var> = parts.iter().copied().filter(|&p| !self.value(p).is_empty()).collect();
        if live.is_empty() {
            return Err(TensorError::arg("concat", "no non-empty inputs"));
        }
        if live.len() == 1 {
            return Ok(live[0]);
        }
        let first = self.shape(live[0]).to_vec();
        let rank = first.len();
        if rank == 0 || rank > 2 || axis >= rank {
            return Err(TensorError::arg("concat", format!("axis {axis} invalid for rank {rank}")));
        }
        for &p in &live[1..] {
            let s = self.shape(p);
            let ok = s.len() == rank && (0..rank).all(|d| d == axis || s[d] == first[d]);
            if !ok {
                return Err(TensorError::dim("concat", &first, s));
            }
        }
        let rg = live.iter().any(|&p| self.rg(p));
        let (shape, out) = if rank == 1 || axis == 0 {
            let mut out = Vec::new();
            for &p in &live {
                out.extend_from_slice(self.value(p));
            }
            let mut shape = first.clone();
            shape[0] = live.iter().map(|&p| self.shape(p)[0]).sum();
            (shape, out)
        } else {
            let rows = first[0];
            let widths: Vec<usize> = live.iter().map(|&p| self.shape(p)[1]).collect();
            let total: usize = widths.iter().sum();
            let mut out = Vec::with_capacity(rows * total);
            for i in 0..rows {
                for (&p, &w) in live.iter().zip(&widths) {
                    out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
                }
            }
            (vec![rows, total], out)
        };
        Ok(self.push(shape, out, Op::Concat { parts: live, axis }, rg))
    }

    /// Splits along `axis` into pieces of the given extents.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>, TensorError> {
        let shape = self.shape(x).to_vec();
        let extent = if shape.len() == 1 { shape[0] } else { shape.get(axis).copied().unwrap_or(0) };
        if sizes.iter().sum::<usize>() != extent {
            return Err(TensorError::dim("split", &shape, sizes));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(if axis == 0 {
                self.slice_rows(x, start, len)?
            } else {
                self.slice_cols(x, start, len)?
            });
            start += len;
        }
        Ok(out)
    }

    /// Rows `start..start+len` of a matrix, or elements of a vector.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> OpResult {
        let shape = self.shape(x).to_vec();
        let (rows, cols, out_shape) = if shape.len() == 1 {
            (shape[0], 1, vec![len])
        } else if shape.len() == 2 {
            (shape[0], shape[1], vec![len, shape[1]])
        } else {
            return Err(TensorError::arg("slice_rows", format!("rank {} unsupported", shape.len())));
        };
        if start + len > rows {
            return Err(TensorError::dim("slice_rows", &shape, &[start, len]));
        }
        let out = self.value(x)[start * cols..(start + len) * cols].to_vec();
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::SliceRows { src: x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> OpResult {
        let shape = self.shape(x).to_vec();
        let (r, c) = as_matrix(&shape);
        if shape.len() > 2 || start + len > c {
            return Err(TensorError::dim("slice_cols", &shape, &[start, len]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let out_shape = if shape.len() == 1 { vec![len] } else { vec![r, len] };
        let rg = self.rg(x);
        Ok(self.push(out_shape, out, Op::SliceCols { src: x, start }, rg))
    }

    pub fn row(&mut self, x: Var, i: usize) -> OpResult {
        self.slice_rows(x, i, 1)
    }

    /// Builds a matrix from selected rows (with repetition) of `x`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> OpResult {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::arg("gather_rows", "expects a matrix"));
        }
        let (r, c) = (shape[0], shape[1]);
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::arg("gather_rows", format!("row {bad} out of range for {r} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![rows.len(), c],
            out,
            Op::GatherRows {
                src: x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Repeats a vector (or `1 x c` row) `n` times as an `n x c` matrix.
    pub fn broadcast_rows(&mut self, x: Var, n: usize) -> OpResult {
        let (r, c) = self.dims2(x);
        if r != 1 {
            return Err(TensorError::arg("broadcast_rows", format!("expects a single row, got {:?}", self.shape(x))));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * c);
        for _ in 0..n {
            out.extend_from_slice(xv);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![n, c], out, Op::BroadcastRows(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> OpResult {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(TensorError::arg("transpose", "expects a matrix"));
        }
        let (r, c) = (shape[0], shape[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xv[i * c + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c, r], out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> OpResult {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(TensorError::dim("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    /// Column-wise maximum over the rows of a matrix, as a vector.
    pub fn max_rows(&mut self, x: Var) -> OpResult {
        let (r, c) = self.dims2(x);
        if r == 0 {
            return Err(TensorError::arg("max_rows", "no rows"));
        }
        let xv = self.value(x);
        let mut out = xv[..c].to_vec();
        let mut argmax = vec![0usize; c];
        for i in 1..r {
            for j in 0..c {
                let v = xv[i * c + j];
                if v > out[j] {
                    out[j] = v;
                    argmax[j] = i;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![c], out, Op::MaxRows { src: x, argmax }, rg))
    }

    /// Inverted dropout with an independent mask per element. Identity in
    /// eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> OpResult {
        check_rate("dropout", rate)?;
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask(self.value(x).len(), rate, &mut self.rng)?;
        Ok(self.apply_mask(x, mask))
    }

    /// Dropout sharing one mask row across all rows (time steps).
    pub fn dropout_shared_rows(&mut self, x: Var, rate: f64) -> OpResult {
        check_rate("dropout", rate)?;
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let (r, c) = self.dims2(x);
        let row = dropout_mask(c, rate, &mut self.rng)?;
        let mut mask = Vec::with_capacity(r * c);
        for _ in 0..r {
            mask.extend_from_slice(&row);
        }
        Ok(self.apply_mask(x, mask))
    }

    fn apply_mask(&mut self, x: Var, mask: Vec<f64>) -> Var {
        let out = self.value(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Mask { src: x, mask }, rg)
    }

    /// Identity forward whose backward doubles the gradient; lets tests
    /// prove the gradient checker catches a wrong derivative.
    #[cfg(feature = "test-hooks")]
    pub fn corrupted_identity(&mut self, x: Var) -> Var {
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::CorruptedIdentity(x), rg)
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::arg("backward", format!("output must be scalar, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut params: Vec<Option<Vec<f64>>> = vec![None; self.params.len()];

        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gout);
                }
                Op::Param(id) => {
                    params[id.0] = Some(gout);
                }
                Op::MatMul(a, b) => {
                    let sa = &self.nodes[a.0].shape;
                    let sb = &self.nodes[b.0].shape;
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    if self.rg(*a) {
                        let ga = acc(&mut grads, *a, m * k);
                        matmul_a_bt_into(&gout, self.value(*b), m, k, n, ga);
                    }
                    if self.rg(*b) {
                        let gb = acc(&mut grads, *b, k * n);
                        matmul_at_b_into(self.value(*a), &gout, m, k, n, gb);
                    }
                }
                Op::Add(a, b) => {
                    for &p in &[*a, *b] {
                        if self.rg(p) {
                            add_into(acc(&mut grads, p, gout.len()), &gout);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let bv = self.value(*b);
                        let ga = acc(&mut grads, *a, gout.len());
                        for ((g, &d), &y) in ga.iter_mut().zip(&gout).zip(bv) {
                            *g += d * y;
                        }
                    }
                    if self.rg(*b) {
                        let av = self.value(*a);
                        let gb = acc(&mut grads, *b, gout.len());
                        for ((g, &d), &x) in gb.iter_mut().zip(&gout).zip(av) {
                            *g += d * x;
                        }
                    }
                }
                Op::AddRowBias(x, bias) => {
                    if self.rg(*x) {
                        add_into(acc(&mut grads, *x, gout.len()), &gout);
                    }
                    if self.rg(*bias) {
                        let c = self.nodes[bias.0].shape[0];
                        let gb = acc(&mut grads, *bias, c);
                        for row in gout.chunks(c.max(1)) {
                            add_into(gb, row);
                        }
                    }
                }
                Op::Affine(x, scale) => {
                    let gx = acc(&mut grads, *x, gout.len());
                    for (g, &d) in gx.iter_mut().zip(&gout) {
                        *g += scale * d;
                    }
                }
                Op::Sigmoid(x) => {
                    let y = &node.value;
                    let gx = acc(&mut grads, *x, gout.len());
                    for ((g, &d), &s) in gx.iter_mut().zip(&gout).zip(y) {
                        *g += d * s * (1.0 - s);
                    }
                }
                Op::Tanh(x) => {
                    let y = &node.value;
                    let gx = acc(&mut grads, *x, gout.len());
                    for ((g, &d), &t) in gx.iter_mut().zip(&gout).zip(y) {
                        *g += d * (1.0 - t * t);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let gx = acc(&mut grads, *x, gout.len());
                    for ((g, &d), &v) in gx.iter_mut().zip(&gout).zip(xv) {
                        if v > 0.0 {
                            *g += d;
                        }
                    }
                }
                Op::SoftmaxRows(x) => {
                    let (r, c) = as_matrix(&node.shape);
                    let y = &node.value;
                    let gx = acc(&mut grads, *x, r * c);
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let dr = &gout[i * c..(i + 1) * c];
                        let s = dot(yr, dr);
                        for j in 0..c {
                            gx[i * c + j] += yr[j] * (dr[j] - s);
                        }
                    }
                }
                Op::CrossEntropy { logits, target, probs } => {
                    let d = gout[0];
                    let gx = acc(&mut grads, *logits, probs.len());
                    for (j, (g, &p)) in gx.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { 1.0 } else { 0.0 };
                        *g += d * (p - onehot);
                    }
                }
                Op::Concat { parts, axis } => {
                    let rank = node.shape.len();
                    if rank == 1 || *axis == 0 {
                        let mut off = 0;
                        for &p in parts {
                            let len = self.value(p).len();
                            if self.rg(p) {
                                add_into(acc(&mut grads, p, len), &gout[off..off + len]);
                            }
                            off += len;
                        }
                    } else {
                        let rows = node.shape[0];
                        let total = node.shape[1];
                        let mut col = 0;
                        for &p in parts {
                            let w = self.nodes[p.0].shape[1];
                            if self.rg(p) {
                                let gp = acc(&mut grads, p, rows * w);
                                for i in 0..rows {
                                    add_into(&mut gp[i * w..(i + 1) * w], &gout[i * total + col..i * total + col + w]);
                                }
                            }
                            col += w;
                        }
                    }
                }
                Op::SliceRows { src, start } => {
                    let len_src = self.value(*src).len();
                    let cols = if self.nodes[src.0].shape.len() == 1 { 1 } else { self.nodes[src.0].shape[1] };
                    let gs = acc(&mut grads, *src, len_src);
                    add_into(&mut gs[start * cols..start * cols + gout.len()], &gout);
                }
                Op::SliceCols { src, start } => {
                    let (r, c) = as_matrix(&self.nodes[src.0].shape);
                    let (_, w) = as_matrix(&node.shape);
                    let gs = acc(&mut grads, *src, r * c);
                    for i in 0..r {
                        add_into(&mut gs[i * c + start..i * c + start + w], &gout[i * w..(i + 1) * w]);
                    }
                }
                Op::GatherRows { src, rows } => {
                    let c = node.shape[1];
                    let len_src = self.value(*src).len();
                    let gs = acc(&mut grads, *src, len_src);
                    for (k, &i) in rows.iter().enumerate() {
                        add_into(&mut gs[i * c..(i + 1) * c], &gout[k * c..(k + 1) * c]);
                    }
                }
                Op::BroadcastRows(x) => {
                    let c = node.shape[1];
                    let gx = acc(&mut grads, *x, c);
                    for row in gout.chunks(c.max(1)) {
                        add_into(gx, row);
                    }
                }
                Op::Transpose(x) => {
                    let (c, r) = (node.shape[0], node.shape[1]);
                    let gx = acc(&mut grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += gout[j * r + i];
                        }
                    }
                }
                Op::Reshape(x) => {
                    add_into(acc(&mut grads, *x, gout.len()), &gout);
                }
                Op::Sum(x) => {
                    let d = gout[0];
                    let len = self.value(*x).len();
                    for g in acc(&mut grads, *x, len).iter_mut() {
                        *g += d;
                    }
                }
                Op::MaxRows { src, argmax } => {
                    let c = argmax.len();
                    let len = self.value(*src).len();
                    let gs = acc(&mut grads, *src, len);
                    for (j, &i) in argmax.iter().enumerate() {
                        gs[i * c + j] += gout[j];
                    }
                }
                Op::Mask { src, mask } => {
                    let gs = acc(&mut grads, *src, gout.len());
                    for ((g, &d), &m) in gs.iter_mut().zip(&gout).zip(mask) {
                        *g += d * m;
                    }
                }
                #[cfg(feature = "test-hooks")]
                Op::CorruptedIdentity(x) => {
                    let gs = acc(&mut grads, *x, gout.len());
                    for (g, &d) in gs.iter_mut().zip(&gout) {
                        *g += 2.0 * d;
                    }
                }
            }
        }
        Ok(Gradients { params, inputs: grads })
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Gradients of one backward pass, keyed by parameter (and by input leaf
/// for leaves created with `requires_grad`).
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    params: Vec<Option<Vec<f64>>>,
    inputs: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn zeros(store: &ParamStore) -> Self {
        Gradients {
            params: vec![None; store.len()],
            inputs: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn input(&self, v: Var) -> Option<&[f64]> {
        self.inputs.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds another pass's parameter gradients into this one.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => add_into(m, t),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.params.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(i, _)| ParamId(i))
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

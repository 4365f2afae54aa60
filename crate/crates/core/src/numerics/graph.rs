//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] records every primitive in execution order. Values are either
//! borrowed (parameters) or owned (intermediates). [`Graph::backward`] walks the
//! record in reverse, visiting each node once, and accumulates gradients into
//! every input that requires them.

use std::borrow::Cow;

use rand::Rng;

use super::linalg::gemm;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Candidate columns for [`Graph::cross_entropy`].
#[derive(Debug, Clone, PartialEq)]
pub enum Candidates {
    /// Every column except the padding column 0.
    Full,
    /// The target plus a shared negative set. Targets must not appear in the set.
    Sampled(Vec<usize>),
}

#[derive(Debug)]
struct CrossEntropyCache {
    hidden: Var,
    weight: Var,
    bias: Var,
    /// Columns scored for every row.
    shared: Vec<usize>,
    /// Per row: index of the target inside the row's candidate list, if the row is active.
    target_slot: Vec<Option<usize>>,
    targets: Vec<Option<usize>>,
    /// Sampled mode scores the target as an extra column after `shared`.
    extra_target: bool,
    /// Row-major probabilities, `shared.len() + extra_target` per row.
    probs: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    SoftmaxRows {
        x: Var,
        tau: f64,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    ConcatCols {
        a: Var,
        b: Var,
    },
    ConcatRows {
        a: Var,
        b: Var,
    },
    MulMask {
        x: Var,
        mask: Vec<f64>,
    },
    CrossEntropy(Box<CrossEntropyCache>),
    PickLog {
        x: Var,
        cols: Vec<Option<usize>>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// The computation record for one forward pass.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape {
            op,
            left: other.to_vec(),
            right: vec![0, 0],
        }),
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, requires_grad: bool, op: Op) -> Var {
        debug_assert!(
            matches!(op, Op::Leaf) || value.is_finite(),
            "non-finite output from {op:?}"
        );
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Owned differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), true, Op::Leaf)
    }

    /// Borrowed differentiable leaf, typically a model parameter.
    pub fn param(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), true, Op::Leaf)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Cow::Owned(value), false, Op::Leaf)
    }

    pub fn constant_ref(&mut self, value: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(value), false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, `None` if nothing flowed into it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    /// Attention probabilities recorded by a causal attention node:
    /// `heads` row-major `n×n` blocks.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.nodes[v.0].op {
            Op::CausalAttention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, d) = dims2("gather", t)?;
        let mut out = Vec::with_capacity(indices.len() * d);
        for (position, &index) in indices.iter().enumerate() {
            if index >= rows {
                return Err(Error::IndexOutOfRange {
                    position,
                    index,
                    len: rows,
                });
            }
            out.extend_from_slice(t.row(index));
        }
        let value = Tensor::new(vec![indices.len(), d], out)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            Cow::Owned(value),
            rg,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// `x·w + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xt, wt) = (self.value(x), self.value(w));
        let (n, p) = dims2("affine", xt)?;
        let (p2, q) = dims2("affine", wt)?;
        if p != p2 {
            return Err(shape_err("affine", xt, wt));
        }
        let mut out = vec![0.0; n * q];
        if let Some(b) = b {
            let bt = self.value(b);
            if bt.len() != q {
                return Err(shape_err("affine bias", wt, bt));
            }
            for row in out.chunks_exact_mut(q) {
                row.copy_from_slice(bt.data());
            }
        }
        gemm(n, p, q, xt.data(), false, wt.data(), false, &mut out, 1.0);
        let value = Tensor::new(vec![n, q], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.needs(&inputs);
        Ok(self.push(Cow::Owned(value), rg, Op::Affine { x, w, b }))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        self.affine(x, w, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        if at.shape() != bt.shape() {
            return Err(shape_err("add", at, bt));
        }
        let data = at.data().iter().zip(bt.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(value), rg, Op::Add { a, b }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xt = self.value(x);
        let data = xt.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::new(xt.shape().to_vec(), data).expect("same shape");
        let rg = self.needs(&[x]);
        self.push(Cow::Owned(value), rg, Op::Relu { x })
    }

    /// Row-wise `softmax(x / tau)`, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::config(format!("softmax temperature must be > 0, got {tau}")));
        }
        let xt = self.value(x);
        let (_, c) = dims2("softmax_rows", xt)?;
        let mut data = xt.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            softmax_in_place(row, tau);
        }
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Cow::Owned(value), rg, Op::SoftmaxRows { x, tau }))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (xt, gt, bt) = (self.value(x), self.value(gamma), self.value(beta));
        let (_, d) = dims2("layer_norm", xt)?;
        if gt.len() != d || bt.len() != d {
            return Err(shape_err("layer_norm", xt, gt));
        }
        let mut data = xt.data().to_vec();
        for row in data.chunks_exact_mut(d) {
            let (mean, rstd) = moments(row, eps);
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * gt.data()[j] + bt.data()[j];
            }
        }
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Cow::Owned(value),
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
        ))
    }

    /// Multi-head scaled dot-product attention where row `i` only sees rows `j <= i`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let (n, d) = dims2("causal_attention", qt)?;
        if kt.shape() != qt.shape() {
            return Err(shape_err("causal_attention", qt, kt));
        }
        if vt.shape() != qt.shape() {
            return Err(shape_err("causal_attention", qt, vt));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "width {d} is not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * n * n];
        let mut out = vec![0.0; n * d];
        let (qd, kd, vd) = (qt.data(), kt.data(), vt.data());
        for h in 0..heads {
            let off = h * dh;
            let block = &mut probs[h * n * n..(h + 1) * n * n];
            for i in 0..n {
                let qi = &qd[i * d + off..i * d + off + dh];
                let row = &mut block[i * n..i * n + i + 1];
                for (j, s) in row.iter_mut().enumerate() {
                    let kj = &kd[j * d + off..j * d + off + dh];
                    *s = dot(qi, kj) * scale;
                }
                softmax_in_place(row, 1.0);
                let oi = &mut out[i * d + off..i * d + off + dh];
                for (j, &p) in row.iter().enumerate() {
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (o, &vv) in oi.iter_mut().zip(vj) {
                        *o += p * vv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            Cow::Owned(value),
            rg,
            Op::CausalAttention {
                q,
                k,
                v,
                heads,
                probs,
            },
        ))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (n, p) = dims2("concat_cols", at)?;
        let (n2, q) = dims2("concat_cols", bt)?;
        if n != n2 {
            return Err(shape_err("concat_cols", at, bt));
        }
        let mut data = Vec::with_capacity(n * (p + q));
        for i in 0..n {
            data.extend_from_slice(at.row(i));
            data.extend_from_slice(bt.row(i));
        }
        let value = Tensor::new(vec![n, p + q], data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(value), rg, Op::ConcatCols { a, b }))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (at, bt) = (self.value(a), self.value(b));
        let (m, d) = dims2("concat_rows", at)?;
        let (n, d2) = dims2("concat_rows", bt)?;
        if d != d2 {
            return Err(shape_err("concat_rows", at, bt));
        }
        let mut data = at.data().to_vec();
        data.extend_from_slice(bt.data());
        let value = Tensor::new(vec![m + n, d], data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(Cow::Owned(value), rg, Op::ConcatRows { a, b }))
    }

    /// Elementwise product with a constant mask.
    pub fn mul_mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xt = self.value(x);
        if mask.len() != xt.len() {
            return Err(Error::Shape {
                op: "mul_mask",
                left: xt.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let data = xt.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::new(xt.shape().to_vec(), data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(Cow::Owned(value), rg, Op::MulMask { x, mask }))
    }

    /// Inverted dropout. Identity when `rate == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let mask = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        self.mul_mask(x, mask)
    }

    /// Per-row softmax cross-entropy of `hidden·weight + bias` restricted to the
    /// candidate columns. Rows whose target is `None` yield a zero loss.
    pub fn cross_entropy(
        &mut self,
        hidden: Var,
        weight: Var,
        bias: Var,
        targets: &[Option<usize>],
        candidates: &Candidates,
    ) -> Result<Var> {
        let (ht, wt, bt) = (self.value(hidden), self.value(weight), self.value(bias));
        let (n, d) = dims2("cross_entropy", ht)?;
        let (d2, cols) = dims2("cross_entropy", wt)?;
        if d != d2 {
            return Err(shape_err("cross_entropy", ht, wt));
        }
        if bt.len() != cols {
            return Err(shape_err("cross_entropy bias", wt, bt));
        }
        if targets.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy targets",
                left: vec![n],
                right: vec![targets.len()],
            });
        }
        let (shared, extra_target) = match candidates {
            Candidates::Full => ((1..cols).collect::<Vec<_>>(), false),
            Candidates::Sampled(neg) => (neg.clone(), true),
        };
        let mut in_shared = vec![false; cols];
        for (position, &c) in shared.iter().enumerate() {
            if c == 0 || c >= cols {
                return Err(Error::IndexOutOfRange {
                    position,
                    index: c,
                    len: cols,
                });
            }
            in_shared[c] = true;
        }
        let mut target_slot = Vec::with_capacity(n);
        for (row, t) in targets.iter().enumerate() {
            match *t {
                None => target_slot.push(None),
                Some(y) if y == 0 || y >= cols => {
                    return Err(Error::IndexOutOfRange {
                        position: row,
                        index: y,
                        len: cols,
                    })
                }
                Some(y) if extra_target => {
                    if in_shared[y] {
                        return Err(Error::TargetCollision { row, item: y });
                    }
                    target_slot.push(Some(shared.len()));
                }
                Some(y) => target_slot.push(Some(y - 1)),
            }
        }

        let m = shared.len();
        let width = m + usize::from(extra_target);
        let wsh = gather_columns(wt.data(), d, cols, &shared);
        let mut logits = vec![0.0; n * m];
        for row in logits.chunks_exact_mut(m.max(1)).take(n) {
            for (z, &c) in row.iter_mut().zip(&shared) {
                *z = bt.data()[c];
            }
        }
        if m > 0 {
            gemm(n, d, m, ht.data(), false, &wsh, false, &mut logits, 1.0);
        }

        let mut probs = vec![0.0; n * width];
        let mut losses = vec![0.0; n];
        for i in 0..n {
            let Some(slot) = target_slot[i] else { continue };
            let row = &mut probs[i * width..(i + 1) * width];
            row[..m].copy_from_slice(&logits[i * m..(i + 1) * m]);
            if extra_target {
                let y = targets[i].expect("active row");
                row[m] = dot(ht.row(i), &column(wt.data(), d, cols, y)) + bt.data()[y];
            }
            let target_logit = row[slot];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for z in row.iter_mut() {
                *z = (*z - max).exp();
                sum += *z;
            }
            for z in row.iter_mut() {
                *z /= sum;
            }
            losses[i] = max + sum.ln() - target_logit;
        }
        let value = Tensor::new(vec![n], losses)?;
        let rg = self.needs(&[hidden, weight, bias]);
        let cache = CrossEntropyCache {
            hidden,
            weight,
            bias,
            shared,
            target_slot,
            targets: targets.to_vec(),
            extra_target,
            probs,
        };
        Ok(self.push(Cow::Owned(value), rg, Op::CrossEntropy(Box::new(cache))))
    }

    /// `out[t] = ln x[t, cols[t]]`, zero where `cols[t]` is `None`.
    pub fn pick_log(&mut self, x: Var, cols: &[Option<usize>]) -> Result<Var> {
        let xt = self.value(x);
        let (n, c) = dims2("pick_log", xt)?;
        if cols.len() != n {
            return Err(Error::Shape {
                op: "pick_log",
                left: xt.shape().to_vec(),
                right: vec![cols.len()],
            });
        }
        let mut out = vec![0.0; n];
        for (t, col) in cols.iter().enumerate() {
            if let Some(j) = *col {
                if j >= c {
                    return Err(Error::IndexOutOfRange {
                        position: t,
                        index: j,
                        len: c,
                    });
                }
                out[t] = xt.get(t, j).ln();
            }
        }
        let value = Tensor::new(vec![n], out)?;
        let rg = self.needs(&[x]);
        Ok(self.push(
            Cow::Owned(value),
            rg,
            Op::PickLog {
                x,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Scalar `Σ_i weights[i]·x[i]`.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let xt = self.value(x);
        if weights.len() != xt.len() {
            return Err(Error::Shape {
                op: "weighted_sum",
                left: xt.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let s = dot(xt.data(), weights);
        let rg = self.needs(&[x]);
        Ok(self.push(
            Cow::Owned(Tensor::scalar(s)),
            rg,
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ones = vec![1.0; self.value(x).len()];
        self.weighted_sum(x, &ones)
    }

    /// Reverse pass from a scalar node. Each recorded node is visited once, in
    /// reverse execution order.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                left: self.nodes[loss.0].value.shape().to_vec(),
                right: vec![],
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(gout) = node.grad.as_deref() else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            backward_node(before, node, gout);
        }
        Ok(())
    }
}

fn grad_of<'n>(nodes: &'n mut [Node<'_>], v: Var) -> Option<&'n mut [f64]> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(node.grad.get_or_insert_with(|| vec![0.0; len]))
}

fn backward_node(nodes: &mut [Node<'_>], node: &Node<'_>, gout: &[f64]) {
    let out = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Gather { table, indices } => {
            let d = out.cols();
            if let Some(g) = grad_of(nodes, *table) {
                for (t, &idx) in indices.iter().enumerate() {
                    let src = &gout[t * d..(t + 1) * d];
                    for (a, b) in g[idx * d..(idx + 1) * d].iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
        }
        Op::Affine { x, w, b } => {
            let (n, p) = (nodes[x.0].value.rows(), nodes[x.0].value.cols());
            let q = out.cols();
            if nodes[x.0].requires_grad {
                let wd = nodes[w.0].value.data().to_vec();
                let g = grad_of(nodes, *x).expect("requires grad");
                gemm(n, q, p, gout, false, &wd, true, g, 1.0);
            }
            if nodes[w.0].requires_grad {
                let xd = nodes[x.0].value.data().to_vec();
                let g = grad_of(nodes, *w).expect("requires grad");
                gemm(p, n, q, &xd, true, gout, false, g, 1.0);
            }
            if let Some(g) = b.and_then(|b| grad_of(nodes, b)) {
                for row in gout.chunks_exact(q) {
                    for (a, v) in g.iter_mut().zip(row) {
                        *a += v;
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for v in [a, b] {
                if let Some(g) = grad_of(nodes, *v) {
                    for (x, y) in g.iter_mut().zip(gout) {
                        *x += y;
                    }
                }
            }
        }
        Op::Relu { x } => {
            if let Some(g) = grad_of(nodes, *x) {
                for ((a, &o), &go) in g.iter_mut().zip(out.data()).zip(gout) {
                    if o > 0.0 {
                        *a += go;
                    }
                }
            }
        }
        Op::SoftmaxRows { x, tau } => {
            let c = out.cols();
            if let Some(g) = grad_of(nodes, *x) {
                for ((grow, yrow), dyrow) in g
                    .chunks_exact_mut(c)
                    .zip(out.data().chunks_exact(c))
                    .zip(gout.chunks_exact(c))
                {
                    let s = dot(yrow, dyrow);
                    for ((a, &y), &dy) in grow.iter_mut().zip(yrow).zip(dyrow) {
                        *a += y * (dy - s) / tau;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            eps,
        } => {
            let d = out.cols();
            let xd = nodes[x.0].value.data().to_vec();
            let gd = nodes[gamma.0].value.data().to_vec();
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            let mut dx = vec![0.0; xd.len()];
            for ((xrow, dyrow), dxrow) in xd
                .chunks_exact(d)
                .zip(gout.chunks_exact(d))
                .zip(dx.chunks_exact_mut(d))
            {
                let (mean, rstd) = moments(xrow, *eps);
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for j in 0..d {
                    let xhat = (xrow[j] - mean) * rstd;
                    let dxhat = dyrow[j] * gd[j];
                    dgamma[j] += dyrow[j] * xhat;
                    dbeta[j] += dyrow[j];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                }
                mean_dxhat /= d as f64;
                mean_dxhat_xhat /= d as f64;
                for j in 0..d {
                    let xhat = (xrow[j] - mean) * rstd;
                    let dxhat = dyrow[j] * gd[j];
                    dxrow[j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
            add_into(nodes, *x, &dx);
            add_into(nodes, *gamma, &dgamma);
            add_into(nodes, *beta, &dbeta);
        }
        Op::CausalAttention {
            q,
            k,
            v,
            heads,
            probs,
        } => {
            let (n, d) = (out.rows(), out.cols());
            let dh = d / heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let qd = nodes[q.0].value.data().to_vec();
            let kd = nodes[k.0].value.data().to_vec();
            let vd = nodes[v.0].value.data().to_vec();
            let mut dq = vec![0.0; n * d];
            let mut dk = vec![0.0; n * d];
            let mut dv = vec![0.0; n * d];
            let mut dp = vec![0.0; n];
            for h in 0..*heads {
                let off = h * dh;
                let block = &probs[h * n * n..(h + 1) * n * n];
                for i in 0..n {
                    let p = &block[i * n..i * n + i + 1];
                    let doi = &gout[i * d + off..i * d + off + dh];
                    for (j, &pij) in p.iter().enumerate() {
                        let vj = &vd[j * d + off..j * d + off + dh];
                        dp[j] = dot(doi, vj);
                        for (a, &g) in dv[j * d + off..j * d + off + dh].iter_mut().zip(doi) {
                            *a += pij * g;
                        }
                    }
                    let s = dot(p, &dp[..=i]);
                    for (j, &pij) in p.iter().enumerate() {
                        let ds = pij * (dp[j] - s) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        for c in 0..dh {
                            dq[i * d + off + c] += ds * kd[j * d + off + c];
                            dk[j * d + off + c] += ds * qd[i * d + off + c];
                        }
                    }
                }
            }
            add_into(nodes, *q, &dq);
            add_into(nodes, *k, &dk);
            add_into(nodes, *v, &dv);
        }
        Op::ConcatCols { a, b } => {
            let p = nodes[a.0].value.cols();
            let w = out.cols();
            if let Some(g) = grad_of(nodes, *a) {
                for (grow, orow) in g.chunks_exact_mut(p).zip(gout.chunks_exact(w)) {
                    for (x, y) in grow.iter_mut().zip(&orow[..p]) {
                        *x += y;
                    }
                }
            }
            if let Some(g) = grad_of(nodes, *b) {
                let q = w - p;
                for (grow, orow) in g.chunks_exact_mut(q).zip(gout.chunks_exact(w)) {
                    for (x, y) in grow.iter_mut().zip(&orow[p..]) {
                        *x += y;
                    }
                }
            }
        }
        Op::ConcatRows { a, b } => {
            let split = nodes[a.0].value.len();
            if let Some(g) = grad_of(nodes, *a) {
                for (x, y) in g.iter_mut().zip(&gout[..split]) {
                    *x += y;
                }
            }
            if let Some(g) = grad_of(nodes, *b) {
                for (x, y) in g.iter_mut().zip(&gout[split..]) {
                    *x += y;
                }
            }
        }
        Op::MulMask { x, mask } => {
            if let Some(g) = grad_of(nodes, *x) {
                for ((a, m), go) in g.iter_mut().zip(mask).zip(gout) {
                    *a += m * go;
                }
            }
        }
        Op::CrossEntropy(cache) => cross_entropy_backward(nodes, cache, gout),
        Op::PickLog { x, cols } => {
            let c = nodes[x.0].value.cols();
            let xd = nodes[x.0].value.data().to_vec();
            if let Some(g) = grad_of(nodes, *x) {
                for (t, col) in cols.iter().enumerate() {
                    if let Some(j) = *col {
                        g[t * c + j] += gout[t] / xd[t * c + j];
                    }
                }
            }
        }
        Op::WeightedSum { x, weights } => {
            if let Some(g) = grad_of(nodes, *x) {
                for (a, w) in g.iter_mut().zip(weights) {
                    *a += gout[0] * w;
                }
            }
        }
    }
}

fn cross_entropy_backward(nodes: &mut [Node<'_>], c: &CrossEntropyCache, gout: &[f64]) {
    let (n, d) = (nodes[c.hidden.0].value.rows(), nodes[c.hidden.0].value.cols());
    let cols = nodes[c.weight.0].value.cols();
    let m = c.shared.len();
    let width = m + usize::from(c.extra_target);

    // dz over the shared block, plus the per-row extra target column.
    let mut dz = vec![0.0; n * m];
    let mut dz_extra = vec![0.0; n];
    for i in 0..n {
        let Some(slot) = c.target_slot[i] else { continue };
        let p = &c.probs[i * width..(i + 1) * width];
        let g = gout[i];
        for j in 0..m {
            dz[i * m + j] = g * p[j];
        }
        if c.extra_target {
            dz_extra[i] = g * (p[m] - 1.0);
        } else {
            dz[i * m + slot] -= g;
        }
    }

    let hd = nodes[c.hidden.0].value.data().to_vec();
    let wd = nodes[c.weight.0].value.data().to_vec();

    if let Some(gh) = grad_of(nodes, c.hidden) {
        if m > 0 {
            let wsh = gather_columns(&wd, d, cols, &c.shared);
            gemm(n, m, d, &dz, false, &wsh, true, gh, 1.0);
        }
        if c.extra_target {
            for i in 0..n {
                let Some(y) = c.targets[i] else { continue };
                for r in 0..d {
                    gh[i * d + r] += dz_extra[i] * wd[r * cols + y];
                }
            }
        }
    }
    if let Some(gw) = grad_of(nodes, c.weight) {
        if m > 0 {
            let mut dwsh = vec![0.0; d * m];
            gemm(d, n, m, &hd, true, &dz, false, &mut dwsh, 0.0);
            for r in 0..d {
                for (j, &col) in c.shared.iter().enumerate() {
                    gw[r * cols + col] += dwsh[r * m + j];
                }
            }
        }
        if c.extra_target {
            for i in 0..n {
                let Some(y) = c.targets[i] else { continue };
                for r in 0..d {
                    gw[r * cols + y] += dz_extra[i] * hd[i * d + r];
                }
            }
        }
    }
    if let Some(gb) = grad_of(nodes, c.bias) {
        for i in 0..n {
            for (j, &col) in c.shared.iter().enumerate() {
                gb[col] += dz[i * m + j];
            }
            if c.extra_target {
                if let Some(y) = c.targets[i] {
                    gb[y] += dz_extra[i];
                }
            }
        }
    }
}

fn add_into(nodes: &mut [Node<'_>], v: Var, delta: &[f64]) {
    if let Some(g) = grad_of(nodes, v) {
        for (a, b) in g.iter_mut().zip(delta) {
            *a += b;
        }
    }
}

fn gather_columns(w: &[f64], rows: usize, cols: usize, which: &[usize]) -> Vec<f64> {
    let m = which.len();
    let mut out = vec![0.0; rows * m];
    for r in 0..rows {
        let src = &w[r * cols..(r + 1) * cols];
        for (j, &c) in which.iter().enumerate() {
            out[r * m + j] = src[c];
        }
    }
    out
}

fn column(w: &[f64], rows: usize, cols: usize, c: usize) -> Vec<f64> {
    (0..rows).map(|r| w[r * cols + c]).collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn moments(row: &[f64], eps: f64) -> (f64, f64) {
    let d = row.len() as f64;
    let mean = row.iter().sum::<f64>() / d;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Numerically stable in-place `softmax(row / tau)`.
pub(crate) fn softmax_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

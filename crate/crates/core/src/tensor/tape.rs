use super::kernels::{self, log_sum_exp, sigmoid, softmax_into};
use super::Tensor;
use crate::error::{GraftError, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Sum(Var),
    SoftmaxRows(Var),
    Silu(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        n_heads: usize,
        cos: Vec<f64>,
        sin: Vec<f64>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        seq_len: usize,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f32>,
    requires_grad: bool,
    op: Op,
}

/// Records one forward pass so its adjoints can be replayed once.
///
/// Leaves are copied in from [`Tensor`]s; a leaf requires grad iff its
/// source tensor does, and every derived value requires grad iff one of its
/// inputs does. Subgraphs that depend only on frozen values are skipped
/// entirely during [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], one buffer per grad-requiring leaf.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f32]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        other => Err(GraftError::Shape(format!(
            "{what}: expected a matrix, got shape {other:?}"
        ))),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).requires_grad)
    }

    /// Records a copy of `t` as a leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are well-formed")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul lhs")?;
        let (k2, n) = dims2(self.shape(b), "matmul rhs")?;
        if k != k2 {
            return Err(GraftError::Shape(format!(
                "matmul inner dimensions disagree: [{m}×{k}] · [{k2}×{n}]"
            )));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(GraftError::Shape(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "add_row")?;
        if self.shape(bias) != [n] {
            return Err(GraftError::Shape(format!(
                "row bias of shape {:?} for matrix with {n} columns",
                self.shape(bias)
            )));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(b) {
                *o += bv;
            }
        }
        debug_assert_eq!(out.len(), m * n);
        let rg = self.rg(&[x, bias]);
        Ok(self.push(vec![m, n], out, rg, Op::AddRow(x, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Var {
        let out = self.value(x).iter().map(|v| v * factor).collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Scale(x, factor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|&v| v as f64).sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], vec![s as f32], rg, Op::Sum(x))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "softmax_rows")?;
        let out = kernels::softmax_rows(self.value(x), m, n);
        let rg = self.rg(&[x]);
        Ok(self.push(vec![m, n], out, rg, Op::SoftmaxRows(x)))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .iter()
            .map(|&v| (v as f64 * sigmoid(v as f64)) as f32)
            .collect();
        let rg = self.rg(&[x]);
        self.push(self.shape(x).to_vec(), out, rg, Op::Silu(x))
    }

    /// `gain ⊙ x / sqrt(mean(x²) + eps)` over the last axis.
    ///
    /// A row whose mean square plus `eps` is exactly zero maps to zeros.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        let d = *self.shape(x).last().unwrap();
        if self.shape(gain) != [d] {
            return Err(GraftError::Shape(format!(
                "rms_norm gain of shape {:?} for feature size {d}",
                self.shape(gain)
            )));
        }
        if !(eps >= 0.0) {
            return Err(GraftError::Contract(format!("rms_norm eps must be >= 0, got {eps}")));
        }
        let xs = self.value(x);
        let g = self.value(gain);
        let mut out = vec![0.0f32; xs.len()];
        let mut inv_rms = Vec::with_capacity(xs.len() / d);
        for (row, orow) in xs.chunks(d).zip(out.chunks_mut(d)) {
            let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / d as f64;
            let denom = (ms + eps as f64).sqrt();
            let r = if denom > 0.0 { 1.0 / denom } else { 0.0 };
            for ((o, &v), &gv) in orow.iter_mut().zip(row).zip(g) {
                *o = (gv as f64 * v as f64 * r) as f32;
            }
            inv_rms.push(r);
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            rg,
            Op::RmsNorm { x, gain, inv_rms },
        ))
    }

    /// Gathers rows `ids` of `table[V×d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = dims2(self.shape(table), "embedding table")?;
        if ids.is_empty() {
            return Err(GraftError::Shape("embedding lookup of zero ids".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(GraftError::Index(format!(
                    "token id {id} out of range for vocabulary of {v}"
                )));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Rotary position embedding applied per head to `x[rows×d]`.
    ///
    /// Within each head of size `dh`, feature `i` is paired with `i + dh/2`
    /// and rotated by `position · base^(-2i/dh)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], n_heads: usize, base: f64) -> Result<Var> {
        let (rows, d) = dims2(self.shape(x), "rope")?;
        if positions.len() != rows {
            return Err(GraftError::Shape(format!(
                "rope: {} positions for {rows} rows",
                positions.len()
            )));
        }
        if n_heads == 0 || !d.is_multiple_of(n_heads) || !(d / n_heads).is_multiple_of(2) {
            return Err(GraftError::Shape(format!(
                "rope: feature size {d} does not split into {n_heads} even-sized heads"
            )));
        }
        let dh = d / n_heads;
        let half = dh / 2;
        let freqs: Vec<f64> = (0..half).map(|i| base.powf(-2.0 * i as f64 / dh as f64)).collect();
        let mut cos = Vec::with_capacity(rows * half);
        let mut sin = Vec::with_capacity(rows * half);
        for &p in positions {
            for &freq in &freqs {
                let angle = p as f64 * freq;
                cos.push(angle.cos());
                sin.push(angle.sin());
            }
        }
        let out = rotate(self.value(x), rows, n_heads, dh, &cos, &sin, 1.0);
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![rows, d],
            out,
            rg,
            Op::Rope {
                x,
                n_heads,
                cos,
                sin,
            },
        ))
    }

    /// Multi-head causal self-attention over `q, k, v[rows×d]`.
    ///
    /// Rows are consecutive sequences of `seq_len` positions each; position
    /// `i` attends to positions `j <= i` of its own sequence. Heads split the
    /// feature axis evenly and scores are scaled by `1/sqrt(d/n_heads)`. The
    /// output concatenates the heads along the feature axis.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        seq_len: usize,
    ) -> Result<Var> {
        let (rows, d) = dims2(self.shape(q), "attention query")?;
        if self.shape(k) != [rows, d] || self.shape(v) != [rows, d] {
            return Err(GraftError::Shape(format!(
                "attention q/k/v shapes differ: {:?} {:?} {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v)
            )));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(GraftError::Shape(format!(
                "attention: {d} features do not split into {n_heads} heads"
            )));
        }
        if seq_len == 0 || rows % seq_len != 0 {
            return Err(GraftError::Shape(format!(
                "attention: {rows} rows are not a whole number of length-{seq_len} sequences"
            )));
        }
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let t = seq_len;
        let mut probs = vec![0.0f32; (rows / t) * n_heads * t * t];
        let mut out = vec![0.0f32; rows * d];
        for (s, pblock) in probs.chunks_mut(n_heads * t * t).enumerate() {
            for (h, p) in pblock.chunks_mut(t * t).enumerate() {
                let qh = head_slice(qv, s, h, t, d, dh);
                let kh = head_slice(kv, s, h, t, d, dh);
                let scores = kernels::matmul_nt(&qh, &kh, t, t, dh);
                for i in 0..t {
                    let row: Vec<f32> = scores[i * t..=i * t + i]
                        .iter()
                        .map(|&x| (x as f64 * scale) as f32)
                        .collect();
                    softmax_into(&row, &mut p[i * t..=i * t + i]);
                }
                let oh = kernels::matmul(p, &head_slice(vv, s, h, t, d, dh), t, t, dh);
                scatter_head(&mut out, &oh, s, h, t, d, dh);
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![rows, d],
            out,
            rg,
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                seq_len,
                probs,
            },
        ))
    }

    /// Mean over rows of `-log softmax(logits)[target]`, as a 1-element tensor.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (t, vocab) = dims2(self.shape(logits), "cross_entropy logits")?;
        if targets.len() != t {
            return Err(GraftError::Shape(format!(
                "cross_entropy: {} targets for {t} rows",
                targets.len()
            )));
        }
        let lv = self.value(logits);
        let mut total = 0.0f64;
        for (i, &target) in targets.iter().enumerate() {
            if target >= vocab {
                return Err(GraftError::Index(format!(
                    "target {target} out of range for {vocab} classes"
                )));
            }
            let row = &lv[i * vocab..(i + 1) * vocab];
            total += log_sum_exp(row) - row[target] as f64;
        }
        let loss = (total / t as f64) as f32;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
        ))
    }

    /// Replays adjoints from a one-element `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(GraftError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.node(loss).shape
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop(node, &g, &mut grads);
        }
        // Only leaf gradients are meaningful to callers.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !matches!(n.op, Op::Leaf) || !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let mut send = |var: Var, delta: Vec<f32>| {
            if !self.node(var).requires_grad {
                return;
            }
            match &mut grads[var.0] {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(delta) {
                        *a += d;
                    }
                }
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    send(*a, kernels::matmul_nt(g, self.value(*b), m, k, n));
                }
                if self.requires_grad(*b) {
                    send(*b, kernels::matmul_tn(self.value(*a), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::AddRow(x, bias) => {
                send(*x, g.to_vec());
                if self.requires_grad(*bias) {
                    let n = self.shape(*bias)[0];
                    let mut acc = vec![0.0f64; n];
                    for row in g.chunks(n) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += *v as f64;
                        }
                    }
                    send(*bias, acc.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    send(*a, g.iter().zip(self.value(*b)).map(|(g, y)| g * y).collect());
                }
                if self.requires_grad(*b) {
                    send(*b, g.iter().zip(self.value(*a)).map(|(g, x)| g * x).collect());
                }
            }
            Op::Scale(x, f) => send(*x, g.iter().map(|v| v * f).collect()),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::SoftmaxRows(x) => {
                let n = node.shape[1];
                let mut dx = vec![0.0f32; g.len()];
                for ((grow, prow), drow) in g.chunks(n).zip(node.value.chunks(n)).zip(dx.chunks_mut(n)) {
                    let dot: f64 = grow.iter().zip(prow).map(|(a, b)| *a as f64 * *b as f64).sum();
                    for ((d, &gv), &p) in drow.iter_mut().zip(grow).zip(prow) {
                        *d = (p as f64 * (gv as f64 - dot)) as f32;
                    }
                }
                send(*x, dx);
            }
            Op::Silu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(&gv, &xv)| {
                        let s = sigmoid(xv as f64);
                        (gv as f64 * s * (1.0 + xv as f64 * (1.0 - s))) as f32
                    })
                    .collect();
                send(*x, dx);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xs = self.value(*x);
                let gs = self.value(*gain);
                let d = gs.len();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0f32; xs.len()];
                    for (((xrow, grow), drow), &r) in
                        xs.chunks(d).zip(g.chunks(d)).zip(dx.chunks_mut(d)).zip(inv_rms)
                    {
                        let s: f64 = xrow
                            .iter()
                            .zip(grow)
                            .zip(gs)
                            .map(|((&xv, &gv), &w)| xv as f64 * gv as f64 * w as f64)
                            .sum();
                        let c = r * r * r * s / d as f64;
                        for (((o, &xv), &gv), &w) in drow.iter_mut().zip(xrow).zip(grow).zip(gs) {
                            *o = (r * w as f64 * gv as f64 - c * xv as f64) as f32;
                        }
                    }
                    send(*x, dx);
                }
                if self.requires_grad(*gain) {
                    let mut acc = vec![0.0f64; d];
                    for ((xrow, grow), &r) in xs.chunks(d).zip(g.chunks(d)).zip(inv_rms) {
                        for ((a, &xv), &gv) in acc.iter_mut().zip(xrow).zip(grow) {
                            *a += gv as f64 * xv as f64 * r;
                        }
                    }
                    send(*gain, acc.into_iter().map(|v| v as f32).collect());
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0f32; self.value(*table).len()];
                for (row, &id) in g.chunks(d).zip(ids) {
                    for (a, v) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *a += v;
                    }
                }
                send(*table, dt);
            }
            Op::Rope {
                x,
                n_heads,
                cos,
                sin,
            } => {
                let (rows, d) = (node.shape[0], node.shape[1]);
                send(*x, rotate(g, rows, *n_heads, d / n_heads, cos, sin, -1.0));
            }
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                seq_len,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(node, *q, *k, *v, *n_heads, *seq_len, probs, g);
                send(*q, dq);
                send(*k, dk);
                send(*v, dv);
            }
            Op::CrossEntropy { logits, targets } => {
                let vocab = self.shape(*logits)[1];
                let lv = self.value(*logits);
                let scale = g[0] as f64 / targets.len() as f64;
                let mut dl = vec![0.0f32; lv.len()];
                for ((row, drow), &target) in lv.chunks(vocab).zip(dl.chunks_mut(vocab)).zip(targets) {
                    let lse = log_sum_exp(row);
                    for (j, (d, &z)) in drow.iter_mut().zip(row).enumerate() {
                        let p = (z as f64 - lse).exp();
                        let onehot = if j == target { 1.0 } else { 0.0 };
                        *d = ((p - onehot) * scale) as f32;
                    }
                }
                send(*logits, dl);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        node: &Node,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        t: usize,
        probs: &[f32],
        g: &[f32],
    ) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
        let (rows, d) = (node.shape[0], node.shape[1]);
        let dh = d / n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut dq = vec![0.0f32; rows * d];
        let mut dk = vec![0.0f32; rows * d];
        let mut dv = vec![0.0f32; rows * d];
        for s in 0..rows / t {
            for h in 0..n_heads {
                let p = &probs[(s * n_heads + h) * t * t..][..t * t];
                let go = head_slice(g, s, h, t, d, dh);
                let dp = kernels::matmul_nt(&go, &head_slice(vv, s, h, t, d, dh), t, t, dh);
                scatter_head(&mut dv, &kernels::matmul_tn(p, &go, t, t, dh), s, h, t, d, dh);
                let mut ds = vec![0.0f32; t * t];
                for i in 0..t {
                    let (prow, dprow) = (&p[i * t..=i * t + i], &dp[i * t..=i * t + i]);
                    let weighted: f64 = prow.iter().zip(dprow).map(|(&a, &b)| a as f64 * b as f64).sum();
                    for ((o, &pv), &dpv) in ds[i * t..].iter_mut().zip(prow).zip(dprow) {
                        *o = (pv as f64 * (dpv as f64 - weighted) * scale) as f32;
                    }
                }
                let kh = head_slice(kv, s, h, t, d, dh);
                let qh = head_slice(qv, s, h, t, d, dh);
                scatter_head(&mut dq, &kernels::matmul(&ds, &kh, t, t, dh), s, h, t, d, dh);
                scatter_head(&mut dk, &kernels::matmul_tn(&ds, &qh, t, t, dh), s, h, t, d, dh);
            }
        }
        (dq, dk, dv)
    }
}

/// Copies head `h` of sequence `s` out of `x[rows×d]` into a dense `[t×dh]`.
fn head_slice(x: &[f32], s: usize, h: usize, t: usize, d: usize, dh: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(t * dh);
    for i in 0..t {
        out.extend_from_slice(&x[(s * t + i) * d + h * dh..][..dh]);
    }
    out
}

fn scatter_head(x: &mut [f32], head: &[f32], s: usize, h: usize, t: usize, d: usize, dh: usize) {
    for (i, row) in head.chunks(dh).enumerate() {
        x[(s * t + i) * d + h * dh..][..dh].copy_from_slice(row);
    }
}

/// Rotates feature pairs `(i, i + dh/2)` of every head; `dir = -1` inverts.
fn rotate(
    x: &[f32],
    rows: usize,
    n_heads: usize,
    dh: usize,
    cos: &[f64],
    sin: &[f64],
    dir: f64,
) -> Vec<f32> {
    let half = dh / 2;
    let d = n_heads * dh;
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        let cs = &cos[r * half..(r + 1) * half];
        let sn = &sin[r * half..(r + 1) * half];
        for h in 0..n_heads {
            let base = r * d + h * dh;
            for i in 0..half {
                let (a, b) = (x[base + i] as f64, x[base + i + half] as f64);
                let (c, s) = (cs[i], dir * sn[i]);
                out[base + i] = (a * c - b * s) as f32;
                out[base + i + half] = (a * s + b * c) as f32;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(shape: &[usize], data: Vec<f32>) -> Tensor {
        let mut t = Tensor::new(shape.to_vec(), data).unwrap();
        t.set_requires_grad(true);
        t
    }

    #[test]
    fn matmul_identity_and_zero() {
        let mut tape = Tape::new();
        let eye = tape.constant([2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = tape.constant([2, 3], vec![1.5, -2.0, 3.0, 0.25, 7.0, -1.0]).unwrap();
        let z = tape.constant([3, 2], vec![0.0; 6]).unwrap();
        let ia = tape.matmul(eye, a).unwrap();
        assert_eq!(tape.value(ia), tape.value(a));
        let az = tape.matmul(a, z).unwrap();
        assert!(tape.value(az).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let mut tape = Tape::new();
        let a = tape.constant([2, 3], vec![0.0; 6]).unwrap();
        let b = tape.constant([2, 3], vec![0.0; 6]).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(GraftError::Shape(_))));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape
            .constant([2, 2], vec![3.0, 3.0, 0.0, std::f32::consts::LN_2])
            .unwrap();
        let p = tape.softmax_rows(x).unwrap();
        let v = tape.value(p);
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] as f64 - 1.0 / 3.0).abs() < 1e-7);
        assert!((v[3] as f64 - 2.0 / 3.0).abs() < 1e-7);
    }

    #[test]
    fn rms_norm_examples() {
        let mut tape = Tape::new();
        let x = tape.constant([1, 2], vec![3.0, 4.0]).unwrap();
        let ones = tape.constant([2], vec![1.0, 1.0]).unwrap();
        let y = tape.rms_norm(x, ones, 0.0).unwrap();
        let r = 12.5f64.sqrt();
        assert!((tape.value(y)[0] as f64 - 3.0 / r).abs() < 1e-7);
        assert!((tape.value(y)[1] as f64 - 4.0 / r).abs() < 1e-7);

        let c = tape.constant([1, 4], vec![2.5; 4]).unwrap();
        let g1 = tape.constant([4], vec![1.0; 4]).unwrap();
        let y = tape.rms_norm(c, g1, 1e-6).unwrap();
        assert!(tape.value(y).iter().all(|v| (v - 1.0).abs() < 1e-6));

        let g0 = tape.constant([4], vec![0.0; 4]).unwrap();
        let y = tape.rms_norm(c, g0, 1e-6).unwrap();
        assert!(tape.value(y).iter().all(|v| *v == 0.0));

        let bad = tape.constant([3], vec![1.0; 3]).unwrap();
        assert!(tape.rms_norm(c, bad, 1e-6).is_err());
    }

    #[test]
    fn silu_examples() {
        let mut tape = Tape::new();
        let x = tape.constant([3], vec![0.0, 20.0, 1.0]).unwrap();
        let y = tape.silu(x);
        let v = tape.value(y);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - 20.0).abs() < 1e-6);
        assert!((v[2] as f64 - 0.731_058_578_630_004_9).abs() < 1e-7);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let uniform = tape.constant([2, 5], vec![0.3; 10]).unwrap();
        let l = tape.cross_entropy(uniform, &[0, 4]).unwrap();
        assert!((tape.value(l)[0] as f64 - 5f64.ln()).abs() < 1e-6);

        let sharp = tape.constant([1, 3], vec![-50.0, -50.0, 50.0]).unwrap();
        let l = tape.cross_entropy(sharp, &[2]).unwrap();
        assert!(tape.value(l)[0].abs() < 1e-6);

        let hand = tape.constant([1, 3], vec![0.0, 0.0, std::f32::consts::LN_2]).unwrap();
        let l = tape.cross_entropy(hand, &[2]).unwrap();
        assert!((tape.value(l)[0] as f64 - 2f64.ln()).abs() < 1e-7);

        assert!(matches!(tape.cross_entropy(hand, &[3]), Err(GraftError::Index(_))));
    }

    #[test]
    fn backward_of_sum_and_square() {
        let w = param(&[3], vec![1.0, -2.0, 0.5]);
        let mut tape = Tape::new();
        let wv = tape.leaf(&w);
        let s = tape.sum(wv);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(wv).unwrap(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let wv = tape.leaf(&w);
        let sq = tape.mul(wv, wv).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(wv).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let w = param(&[2], vec![1.0, 2.0]);
        let mut tape = Tape::new();
        let wv = tape.leaf(&w);
        let y = tape.scale(wv, 2.0);
        assert!(matches!(tape.backward(y), Err(GraftError::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let frozen = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let live = param(&[2, 2], vec![0.5, -0.5, 0.25, 1.0]);
        let mut tape = Tape::new();
        let f = tape.leaf(&frozen);
        let l = tape.leaf(&live);
        let y = tape.matmul(f, l).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(f).is_none());
        // d/dL sum(F·L) = Fᵀ·1
        assert_eq!(g.get(l).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn rope_at_position_zero_is_identity_and_preserves_norm() {
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..16).map(|i| (i as f32 * 0.37).cos()).collect();
        let x = tape.constant([2, 8], data.clone()).unwrap();
        let y = tape.rope(x, &[0, 5], 2, 10_000.0).unwrap();
        assert_eq!(&tape.value(y)[..8], &data[..8]);
        let n0: f32 = data[8..].iter().map(|v| v * v).sum();
        let n1: f32 = tape.value(y)[8..].iter().map(|v| v * v).sum();
        assert!((n0 - n1).abs() < 1e-5);
    }

    #[test]
    fn attention_first_position_copies_value() {
        let mut tape = Tape::new();
        let q = tape.constant([2, 4], vec![1.0, 2.0, 3.0, 4.0, 0.5, 0.5, 0.5, 0.5]).unwrap();
        let v = tape.constant([2, 4], vec![9.0, 8.0, 7.0, 6.0, 1.0, 1.0, 1.0, 1.0]).unwrap();
        let o = tape.causal_attention(q, q, v, 2, 2).unwrap();
        assert_eq!(&tape.value(o)[..4], &[9.0, 8.0, 7.0, 6.0]);
        assert!(tape.causal_attention(q, q, v, 3, 2).is_err());
        assert!(tape.causal_attention(q, q, v, 2, 3).is_err());
    }
}

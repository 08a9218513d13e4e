use rand::Rng;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `x · wᵀ + b` with `w` stored `[out × in]`.
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Tanh(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    RepeatRow {
        x: Var,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
        key_mask: Vec<bool>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionGeometry {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for one backward pass.
///
/// All values are row-major matrices (`rows × cols`); vectors are `1 × n`.
/// A tape is consumed by [`Tape::backward`]; recording or differentiating
/// again afterwards is a state error.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar with respect to every leaf that requested them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::State(
                "tape already differentiated; record a new forward pass".into(),
            ))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Copies a node out as a tensor of the given shape.
    pub fn to_tensor(&self, v: Var, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.node(v).value.clone())
    }

    fn leaf_from(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var> {
        self.live()?;
        let (rows, cols) = t.dims2()?;
        Ok(self.push(rows, cols, t.data().to_vec(), Op::Leaf, requires_grad))
    }

    /// Registers a trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf_from(t, true)
    }

    /// Registers a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Result<Var> {
        self.leaf_from(t, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::Shape(format!("matmul of [{m}, {k}] and [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_acc(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul(a, b), rg))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.live()?;
        let (m, input) = self.dims(x);
        let (out_dim, w_in) = self.dims(w);
        if input != w_in {
            return Err(Error::Shape(format!(
                "linear input [{m}, {input}] against weight [{out_dim}, {w_in}]"
            )));
        }
        if let Some(b) = b {
            if self.node(b).value.len() != out_dim {
                return Err(Error::Shape(format!(
                    "bias of length {} for {out_dim} outputs",
                    self.node(b).value.len()
                )));
            }
        }
        let wt = kernels::transpose(self.value(w), out_dim, input);
        let mut out = vec![0.0; m * out_dim];
        kernels::gemm_acc(self.value(x), &wt, &mut out, m, input, out_dim);
        if let Some(b) = b {
            let bias = self.value(b);
            for row in out.chunks_exact_mut(out_dim) {
                row.iter_mut().zip(bias).for_each(|(o, bv)| *o += bv);
            }
        }
        let mut deps = vec![x, w];
        deps.extend(b);
        let rg = self.rg(&deps);
        Ok(self.push(m, out_dim, out, Op::Linear { x, w, b }, rg))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::Shape(format!("{what} of {da:?} and {db:?}")));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (r, c) = self.same_dims(a, b, "add")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (r, c) = self.same_dims(a, b, "mul")?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.live()?;
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|v| v * s).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(r, c, out, Op::Scale(x, s), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let total = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(1, 1, vec![total], Op::Sum(x), rg))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(r, c, out, Op::Tanh(x), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let (r, c) = self.dims(x);
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(r, c, out, Op::Gelu(x), rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let (r, c) = self.dims(x);
        let mut out = self.value(x).to_vec();
        out.chunks_exact_mut(c).for_each(kernels::softmax_in_place);
        let rg = self.rg(&[x]);
        Ok(self.push(r, c, out, Op::SoftmaxRows(x), rg))
    }

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.live()?;
        let (r, c) = self.dims(x);
        if c < 2 || self.node(gamma).value.len() != c || self.node(beta).value.len() != c {
            return Err(Error::Shape(format!("layer_norm over width {c}")));
        }
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        {
            let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
            for ((row, xh), o) in xv
                .chunks_exact(c)
                .zip(xhat.chunks_exact_mut(c))
                .zip(out.chunks_exact_mut(c))
            {
                inv_std.push(kernels::layer_norm_row(row, gv, bv, eps, xh, o));
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Embedding lookup: output row `r` is `table[ids[r]]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.live()?;
        let (rows, c) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::Index(format!("id {bad} out of range for table of {rows} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&tv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            ids.len(),
            c,
            out,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        self.live()?;
        let (n, c) = self.dims(x);
        if let Some(&bad) = rows.iter().find(|&&i| i >= n) {
            return Err(Error::Index(format!("row {bad} out of range for {n} rows")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            rows.len(),
            c,
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Broadcasts a `1 × n` row to `rows × n`.
    pub fn repeat_row(&mut self, x: Var, rows: usize) -> Result<Var> {
        self.live()?;
        let (r, c) = self.dims(x);
        if r != 1 {
            return Err(Error::Shape(format!("repeat_row of [{r}, {c}]")));
        }
        let out = self.value(x).repeat(rows);
        let rg = self.rg(&[x]);
        Ok(self.push(rows, c, out, Op::RepeatRow { x }, rg))
    }

    /// Inverted dropout; `rate == 0` records nothing.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        self.live()?;
        if rate <= 0.0 {
            return Ok(x);
        }
        let (r, c) = self.dims(x);
        let keep = 1.0 / (1.0 - rate);
        let scale: Vec<f64> = (0..r * c)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self.value(x).iter().zip(&scale).map(|(v, s)| v * s).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(r, c, out, Op::Dropout { x, scale }, rg))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k`, `v` are `(batch·seq) × (heads·head_dim)`; head `h` owns columns
    /// `h·head_dim..(h+1)·head_dim`. Keys with `key_mask == false` receive
    /// probability exactly zero and are never read.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
        key_mask: &[bool],
    ) -> Result<Var> {
        self.live()?;
        let AttentionGeometry {
            batch,
            seq,
            heads,
            head_dim,
        } = geom;
        let width = heads * head_dim;
        for var in [q, k, v] {
            if self.dims(var) != (batch * seq, width) {
                return Err(Error::Shape(format!(
                    "attention input {:?}, expected [{}, {width}]",
                    self.dims(var),
                    batch * seq
                )));
            }
        }
        if key_mask.len() != batch * seq {
            return Err(Error::Shape(format!(
                "key mask of length {} for {batch}×{seq}",
                key_mask.len()
            )));
        }
        let scale = 1.0 / (head_dim as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut out = vec![0.0; batch * seq * width];
        let mut probs = vec![0.0; batch * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for b in 0..batch {
            let valid: Vec<usize> = (0..seq).filter(|&j| key_mask[b * seq + j]).collect();
            if valid.is_empty() {
                continue;
            }
            for h in 0..heads {
                let col = h * head_dim;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * width + col..][..head_dim];
                    let mut max = f64::NEG_INFINITY;
                    for &j in &valid {
                        let kj = &kv[(b * seq + j) * width + col..][..head_dim];
                        let s = dot(qi, kj) * scale;
                        scores[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for &j in &valid {
                        scores[j] = (scores[j] - max).exp();
                        sum += scores[j];
                    }
                    let prow = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let orow = &mut out[(b * seq + i) * width + col..][..head_dim];
                    for &j in &valid {
                        let p = scores[j] / sum;
                        prow[j] = p;
                        let vj = &vv[(b * seq + j) * width + col..][..head_dim];
                        orow.iter_mut().zip(vj).for_each(|(o, x)| *o += p * x);
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            batch * seq,
            width,
            out,
            Op::Attention {
                q,
                k,
                v,
                geom,
                key_mask: key_mask.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Attention probabilities saved by an [`Tape::attention`] node, laid out
    /// `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.node(v).op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean cross-entropy of `logits` rows against class `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.live()?;
        let (r, c) = self.dims(logits);
        if r != labels.len() || r == 0 {
            return Err(Error::Shape(format!("{r} logit rows for {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Index(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0;
        for (row, &label) in probs.chunks_exact_mut(c).zip(labels) {
            total += kernels::log_sum_exp(row) - row[label];
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            1,
            1,
            vec![total / r as f64],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar; consumes the recorded graph.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.live()?;
        if self.dims(loss) != (1, 1) {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.dims(loss)
            )));
        }
        let nodes = std::mem::take(&mut self.nodes);
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop(&nodes, node, &g, &mut grads);
        }
        for (g, node) in grads.iter_mut().zip(&nodes) {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient buffer for `v`, zero-initialized on first touch; `None` when `v`
/// does not require a gradient.
fn slot<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn backprop(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].rows, nodes[a.0].cols);
            let n = nodes[b.0].cols;
            if let Some(ga) = slot(nodes, grads, *a) {
                let bt = kernels::transpose(val(*b), k, n);
                kernels::gemm_acc(g, &bt, ga, m, n, k);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                kernels::gemm_tn_acc(val(*a), g, gb, m, k, n);
            }
        }
        Op::Linear { x, w, b } => {
            let (m, input) = (nodes[x.0].rows, nodes[x.0].cols);
            let out = nodes[w.0].rows;
            if let Some(gx) = slot(nodes, grads, *x) {
                kernels::gemm_acc(g, val(*w), gx, m, out, input);
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                kernels::gemm_tn_acc(g, val(*x), gw, m, out, input);
            }
            if let Some(b) = b {
                if let Some(gb) = slot(nodes, grads, *b) {
                    for row in g.chunks_exact(out) {
                        gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(gv) = slot(nodes, grads, *v) {
                    gv.iter_mut().zip(g).for_each(|(a, x)| *a += x);
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((acc, gi), bi) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *acc += gi * bi;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((acc, gi), ai) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *acc += gi * ai;
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(a, v)| *a += v * s);
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                gx.iter_mut().for_each(|a| *a += g[0]);
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((acc, gi), y) in gx.iter_mut().zip(g).zip(&node.value) {
                    *acc += gi * (1.0 - y * y);
                }
            }
        }
        Op::Gelu(x) => {
            let xv = val(*x);
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((acc, gi), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *acc += gi * kernels::gelu_grad(xi);
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let c = node.cols;
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((acc, gr), yr) in gx
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(node.value.chunks_exact(c))
                {
                    let d = dot(gr, yr);
                    for ((a, gi), yi) in acc.iter_mut().zip(gr).zip(yr) {
                        *a += yi * (gi - d);
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = node.cols;
            let gam = val(*gamma);
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (gr, xr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ((a, gi), xi) in gg.iter_mut().zip(gr).zip(xr) {
                        *a += gi * xi;
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for gr in g.chunks_exact(c) {
                    gb.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let n = c as f64;
                let mut dxhat = vec![0.0; c];
                for (((acc, gr), xr), &is) in gx
                    .chunks_exact_mut(c)
                    .zip(g.chunks_exact(c))
                    .zip(xhat.chunks_exact(c))
                    .zip(inv_std)
                {
                    for ((d, gi), ga) in dxhat.iter_mut().zip(gr).zip(gam) {
                        *d = gi * ga;
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / n;
                    let mean_dx = dot(&dxhat, xr) / n;
                    for ((a, d), xi) in acc.iter_mut().zip(&dxhat).zip(xr) {
                        *a += is * (d - mean_d - xi * mean_dx);
                    }
                }
            }
        }
        Op::GatherRows { table, ids } => {
            let c = node.cols;
            if let Some(gt) = slot(nodes, grads, *table) {
                for (&id, gr) in ids.iter().zip(g.chunks_exact(c)) {
                    gt[id * c..(id + 1) * c]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(a, v)| *a += v);
                }
            }
        }
        Op::SelectRows { x, rows } => {
            let c = node.cols;
            if let Some(gx) = slot(nodes, grads, *x) {
                for (&r, gr) in rows.iter().zip(g.chunks_exact(c)) {
                    gx[r * c..(r + 1) * c]
                        .iter_mut()
                        .zip(gr)
                        .for_each(|(a, v)| *a += v);
                }
            }
        }
        Op::RepeatRow { x } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for gr in g.chunks_exact(node.cols) {
                    gx.iter_mut().zip(gr).for_each(|(a, v)| *a += v);
                }
            }
        }
        Op::Dropout { x, scale } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((a, gi), s) in gx.iter_mut().zip(g).zip(scale) {
                    *a += gi * s;
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            geom,
            key_mask,
            probs,
        } => attention_backward(nodes, grads, g, (*q, *k, *v), *geom, key_mask, probs),
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            let c = nodes[logits.0].cols;
            let scale = g[0] / labels.len() as f64;
            if let Some(gl) = slot(nodes, grads, *logits) {
                for ((acc, pr), &label) in gl.chunks_exact_mut(c).zip(probs.chunks_exact(c)).zip(labels) {
                    for (j, (a, p)) in acc.iter_mut().zip(pr).enumerate() {
                        let onehot = if j == label { 1.0 } else { 0.0 };
                        *a += scale * (p - onehot);
                    }
                }
            }
        }
    }
}

fn attention_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<f64>>],
    g: &[f64],
    (q, k, v): (Var, Var, Var),
    geom: AttentionGeometry,
    key_mask: &[bool],
    probs: &[f64],
) {
    let AttentionGeometry {
        batch,
        seq,
        heads,
        head_dim,
    } = geom;
    let width = heads * head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let (qv, kv, vv) = (&nodes[q.0].value, &nodes[k.0].value, &nodes[v.0].value);
    let mut dq = vec![0.0; qv.len()];
    let mut dk = vec![0.0; kv.len()];
    let mut dv = vec![0.0; vv.len()];
    let mut ds = vec![0.0; seq];
    for b in 0..batch {
        let valid: Vec<usize> = (0..seq).filter(|&j| key_mask[b * seq + j]).collect();
        for h in 0..heads {
            let col = h * head_dim;
            for i in 0..seq {
                let prow = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                let gi = &g[(b * seq + i) * width + col..][..head_dim];
                let mut weighted = 0.0;
                for &j in &valid {
                    let vj = &vv[(b * seq + j) * width + col..][..head_dim];
                    let dp = dot(gi, vj);
                    ds[j] = dp;
                    weighted += prow[j] * dp;
                    let dvj = &mut dv[(b * seq + j) * width + col..][..head_dim];
                    dvj.iter_mut().zip(gi).for_each(|(a, x)| *a += prow[j] * x);
                }
                let qi = &qv[(b * seq + i) * width + col..][..head_dim];
                for &j in &valid {
                    let s = prow[j] * (ds[j] - weighted) * scale;
                    if s == 0.0 {
                        continue;
                    }
                    let kj = &kv[(b * seq + j) * width + col..][..head_dim];
                    let dqi = &mut dq[(b * seq + i) * width + col..][..head_dim];
                    dqi.iter_mut().zip(kj).for_each(|(a, x)| *a += s * x);
                    let dkj = &mut dk[(b * seq + j) * width + col..][..head_dim];
                    dkj.iter_mut().zip(qi).for_each(|(a, x)| *a += s * x);
                }
            }
        }
    }
    for (var, d) in [(q, dq), (k, dk), (v, dv)] {
        if let Some(acc) = slot(nodes, grads, var) {
            acc.iter_mut().zip(&d).for_each(|(a, x)| *a += x);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let p = t(&[vec![0.3, -1.2, 4.0]]);
        let mut tape = Tape::new();
        let pv = tape.param(&p).unwrap();
        let loss = tape.sum(pv).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(pv).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let p = t(&[vec![1.0, 2.0]]);
        let mut tape = Tape::new();
        let pv = tape.param(&p).unwrap();
        let sq = tape.mul(pv, pv).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(pv).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn second_backward_is_state_error() {
        let p = t(&[vec![1.0]]);
        let mut tape = Tape::new();
        let pv = tape.param(&p).unwrap();
        let loss = tape.sum(pv).unwrap();
        tape.backward(loss).unwrap();
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));
        assert!(matches!(tape.sum(pv), Err(Error::State(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(&t(&[vec![1.0, 2.0]])).unwrap();
        let c = tape.constant(&t(&[vec![3.0, 4.0]])).unwrap();
        let prod = tape.mul(a, c).unwrap();
        let loss = tape.sum(prod).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(a).unwrap(), &[3.0, 4.0]);
        assert!(g.get(c).is_none());
    }

    /// Central-difference check of every op against a scalar built from it.
    fn check(build: impl Fn(&mut Tape, &[Var]) -> Var, inputs: &[Tensor]) {
        let eval = |vals: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|x| tape.param(x).unwrap()).collect();
            let out = build(&mut tape, &vars);
            tape.value(out)[0]
        };
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x).unwrap()).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        for (which, var) in vars.iter().enumerate() {
            let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[which].numel()]);
            for e in 0..inputs[which].numel() {
                let mut plus = inputs.to_vec();
                plus[which].data_mut()[e] += h;
                let mut minus = inputs.to_vec();
                minus[which].data_mut()[e] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let err = (analytic[e] - fd).abs() / analytic[e].abs().max(1e-8);
                assert!(err < 1e-4 || (analytic[e] - fd).abs() < 1e-10, "input {which} elem {e}: {} vs {fd}", analytic[e]);
            }
        }
    }

    fn rand_mat(r: usize, c: usize, seed: u64) -> Tensor {
        let data = (0..r * c)
            .map(|i| ((i as f64 + 1.0) * 12.9898 + seed as f64 * 78.233).sin() * 1.3)
            .collect();
        Tensor::new(vec![r, c], data).unwrap()
    }

    #[test]
    fn op_gradients_match_finite_differences() {
        let weight = rand_mat(3, 5, 9);
        check(
            |tp, v| {
                let y = tp.matmul(v[0], v[1]).unwrap();
                let y = tp.gelu(y).unwrap();
                let w = tp.constant(&weight).unwrap();
                let z = tp.mul(y, w).unwrap();
                tp.sum(z).unwrap()
            },
            &[rand_mat(3, 4, 1), rand_mat(4, 5, 2)],
        );
        check(
            |tp, v| {
                let y = tp.linear(v[0], v[1], Some(v[2])).unwrap();
                let y = tp.layer_norm(y, v[3], v[4], 1e-12).unwrap();
                let y = tp.tanh(y).unwrap();
                tp.cross_entropy(y, &[0, 2, 1]).unwrap()
            },
            &[
                rand_mat(3, 4, 3),
                rand_mat(3, 4, 4),
                rand_mat(1, 3, 5),
                rand_mat(1, 3, 6),
                rand_mat(1, 3, 7),
            ],
        );
        check(
            |tp, v| {
                let s = tp.softmax_rows(v[0]).unwrap();
                let w = tp.constant(&weight).unwrap();
                let sel = tp.select_rows(s, &[2, 0, 2]).unwrap();
                let z = tp.mul(sel, w).unwrap();
                let g = tp.gather_rows(v[1], &[1, 1, 0]).unwrap();
                let r = tp.repeat_row(v[2], 3).unwrap();
                let zz = tp.add(z, g).unwrap();
                let zz = tp.add(zz, r).unwrap();
                let zz = tp.mul(zz, zz).unwrap();
                let zz = tp.scale(zz, 0.5).unwrap();
                tp.sum(zz).unwrap()
            },
            &[rand_mat(3, 5, 8), rand_mat(2, 5, 10), rand_mat(1, 5, 11)],
        );
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let geom = AttentionGeometry {
            batch: 2,
            seq: 3,
            heads: 2,
            head_dim: 2,
        };
        let mask = [true, true, false, true, true, true];
        let weight = rand_mat(6, 4, 21);
        check(
            |tp, v| {
                let a = tp.attention(v[0], v[1], v[2], geom, &mask).unwrap();
                let w = tp.constant(&weight).unwrap();
                let z = tp.mul(a, w).unwrap();
                tp.sum(z).unwrap()
            },
            &[rand_mat(6, 4, 12), rand_mat(6, 4, 13), rand_mat(6, 4, 14)],
        );
    }

    #[test]
    fn attention_rows_sum_to_one_and_skip_masked_keys() {
        let geom = AttentionGeometry {
            batch: 1,
            seq: 4,
            heads: 2,
            head_dim: 3,
        };
        let mut tape = Tape::new();
        let q = tape.constant(&rand_mat(4, 6, 1)).unwrap();
        let k = tape.constant(&rand_mat(4, 6, 2)).unwrap();
        let v = tape.constant(&rand_mat(4, 6, 3)).unwrap();
        let a = tape.attention(q, k, v, geom, &[true, true, true, false]).unwrap();
        let probs = tape.attention_probs(a).unwrap();
        for row in probs.chunks_exact(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(row[3], 0.0);
        }
    }
}

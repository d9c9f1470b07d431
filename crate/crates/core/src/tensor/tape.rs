//! Reverse-mode autodiff on an append-only tape.
//!
//! Every op records its inputs and its forward value; `backward` walks the
//! tape in reverse and accumulates gradients for each node whose subgraph
//! contains a trainable leaf.  Nodes outside that subgraph are skipped
//! entirely, so frozen weights cost nothing in the backward pass.

use super::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    /// a · b
    Matmul(Var, Var),
    /// a · bᵀ
    MatmulNt(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm { x: Var, gain: Var, bias: Var },
    /// Gather rows of `table`; duplicate ids accumulate in the backward scatter.
    EmbedRows { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize, len: usize },
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    SoftmaxXent { logits: Var, targets: Vec<usize> },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient from the most recent `backward` call, if the node received one.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    // ── forward ops ─────────────────────────────────────────────────────────

    pub fn leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.push(Op::Leaf, value, needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.rows {
            return Err(Error::Shape(format!(
                "matmul {}x{} · {}x{}",
                ta.rows, ta.cols, tb.rows, tb.cols
            )));
        }
        let value = matmul(ta, tb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), value, ng))
    }

    /// `a · bᵀ`, with `a: [m x p]` and `b: [n x p]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols != tb.cols {
            return Err(Error::Shape(format!(
                "matmul_nt {}x{} · ({}x{})ᵀ",
                ta.rows, ta.cols, tb.rows, tb.cols
            )));
        }
        let value = matmul_nt(ta, tb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatmulNt(a, b), value, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if (ta.rows, ta.cols) != (tb.rows, tb.cols) {
            return Err(Error::Shape(format!(
                "add {}x{} + {}x{}",
                ta.rows, ta.cols, tb.rows, tb.cols
            )));
        }
        let mut value = ta.clone();
        value.add_scaled(tb, 1.0);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let mut value = self.value(a).clone();
        for v in &mut value.data {
            *v *= c;
        }
        let ng = self.needs(a);
        self.push(Op::Scale(a, c), value, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for v in &mut value.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        let ng = self.needs(a);
        self.push(Op::Relu(a), value, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for i in 0..value.rows {
            softmax_row(value.row_mut(i));
        }
        let ng = self.needs(a);
        self.push(Op::SoftmaxRows(a), value, ng)
    }

    /// Row-wise layer norm with learnable gain and bias, both `[1 x cols]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols;
        if tg.rows != 1 || tg.cols != d || tb.rows != 1 || tb.cols != d {
            return Err(Error::Shape(format!(
                "layer_norm over {} cols needs 1x{} gain/bias, got {}x{} and {}x{}",
                d, d, tg.rows, tg.cols, tb.rows, tb.cols
            )));
        }
        let mut value = Tensor::zeros(tx.rows, d);
        for i in 0..tx.rows {
            let row = tx.row(i);
            let (mean, inv_std) = row_stats(row);
            let out = value.row_mut(i);
            for j in 0..d {
                out[j] = tg.data[j] * (row[j] - mean) * inv_std + tb.data[j];
            }
        }
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias }, value, ng))
    }

    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if ids.is_empty() {
            return Err(Error::Shape("embed_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= t.rows) {
            return Err(Error::Index(format!(
                "embed_rows id {} out of range for {} rows",
                bad, t.rows
            )));
        }
        let mut value = Tensor::zeros(ids.len(), t.cols);
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).copy_from_slice(t.row(id));
        }
        let ng = self.needs(table);
        Ok(self.push(Op::EmbedRows { table, ids: ids.to_vec() }, value, ng))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if len == 0 || start + len > t.rows {
            return Err(Error::Shape(format!(
                "slice_rows {}..{} of {} rows",
                start,
                start + len,
                t.rows
            )));
        }
        let value = Tensor {
            rows: len,
            cols: t.cols,
            data: t.data[start * t.cols..(start + len) * t.cols].to_vec(),
        };
        let ng = self.needs(x);
        Ok(self.push(Op::SliceRows { x, start, len }, value, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat_rows of nothing".into()));
        };
        let cols = self.value(first).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols != cols {
                return Err(Error::Shape(format!(
                    "concat_rows mixes {} and {} cols",
                    cols, t.cols
                )));
            }
            rows += t.rows;
            data.extend_from_slice(&t.data);
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatRows(parts.to_vec()), Tensor { rows, cols, data }, ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if len == 0 || start + len > t.cols {
            return Err(Error::Shape(format!(
                "slice_cols {}..{} of {} cols",
                start,
                start + len,
                t.cols
            )));
        }
        let mut value = Tensor::zeros(t.rows, len);
        for i in 0..t.rows {
            value
                .row_mut(i)
                .copy_from_slice(&t.row(i)[start..start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(Op::SliceCols { x, start, len }, value, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::Shape("concat_cols of nothing".into()));
        };
        let rows = self.value(first).rows;
        let cols: usize = {
            let mut c = 0;
            for &p in parts {
                let t = self.value(p);
                if t.rows != rows {
                    return Err(Error::Shape(format!(
                        "concat_cols mixes {} and {} rows",
                        rows, t.rows
                    )));
                }
                c += t.cols;
            }
            c
        };
        let mut value = Tensor::zeros(rows, cols);
        for i in 0..rows {
            let out = value.row_mut(i);
            let mut off = 0;
            for &p in parts {
                let t = self.value(p);
                out[off..off + t.cols].copy_from_slice(t.row(i));
                off += t.cols;
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, ng))
    }

    /// Mean cross-entropy of `targets` under a row-wise softmax of `logits`.
    /// Uses the log-sum-exp trick, so extreme logits stay finite.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if targets.len() != t.rows {
            return Err(Error::Shape(format!(
                "{} targets for {} logit rows",
                targets.len(),
                t.rows
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&c| c >= t.cols) {
            return Err(Error::Index(format!(
                "target class {} out of range for {} classes",
                bad, t.cols
            )));
        }
        let mut loss = 0.0;
        for (i, &cls) in targets.iter().enumerate() {
            let row = t.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            loss += lse - row[cls];
        }
        loss /= targets.len() as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxXent { logits, targets: targets.to_vec() },
            Tensor::scalar(loss),
            ng,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────────

    /// Accumulate gradients of the scalar `loss` into every reachable node
    /// that needs them.  Results are read back through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let node = &self.nodes[loss.0];
        if node.value.rows != 1 || node.value.cols != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {}x{}",
                node.value.rows, node.value.cols
            )));
        }
        if !node.needs_grad {
            return Err(Error::Contract(
                "backward on a loss with no trainable inputs".into(),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.push_input_grads(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn push_input_grads(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, matmul_nt(g, self.value(*b)));
                }
                if self.needs(*b) {
                    acc(grads, *b, matmul_tn(self.value(*a), g));
                }
            }
            Op::MatmulNt(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, matmul(g, self.value(*b)));
                }
                if self.needs(*b) {
                    acc(grads, *b, matmul_tn(g, self.value(*a)));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    let mut d = g.clone();
                    for v in &mut d.data {
                        *v *= c;
                    }
                    acc(grads, *a, d);
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let x = self.value(*a);
                    let mut d = g.clone();
                    for (dv, xv) in d.data.iter_mut().zip(&x.data) {
                        if *xv <= 0.0 {
                            *dv = 0.0;
                        }
                    }
                    acc(grads, *a, d);
                }
            }
            Op::SoftmaxRows(a) => {
                if self.needs(*a) {
                    let y = &self.nodes[idx].value;
                    let mut d = Tensor::zeros(y.rows, y.cols);
                    for i in 0..y.rows {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let out = d.row_mut(i);
                        for j in 0..y.cols {
                            out[j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(grads, *a, d);
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let tx = self.value(*x);
                let tg = self.value(*gain);
                let d = tx.cols;
                let inv_d = 1.0 / d as f64;
                let mut dx = Tensor::zeros(tx.rows, d);
                let mut dgain = Tensor::zeros(1, d);
                let mut dbias = Tensor::zeros(1, d);
                let mut xhat = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for i in 0..tx.rows {
                    let row = tx.row(i);
                    let gr = g.row(i);
                    let (mean, inv_std) = row_stats(row);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv_std;
                        dxhat[j] = gr[j] * tg.data[j];
                        dgain.data[j] += gr[j] * xhat[j];
                        dbias.data[j] += gr[j];
                    }
                    let m1: f64 = dxhat.iter().sum::<f64>() * inv_d;
                    let m2: f64 = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() * inv_d;
                    let out = dx.row_mut(i);
                    for j in 0..d {
                        out[j] = inv_std * (dxhat[j] - m1 - xhat[j] * m2);
                    }
                }
                if self.needs(*x) {
                    acc(grads, *x, dx);
                }
                if self.needs(*gain) {
                    acc(grads, *gain, dgain);
                }
                if self.needs(*bias) {
                    acc(grads, *bias, dbias);
                }
            }
            Op::EmbedRows { table, ids } => {
                if self.needs(*table) {
                    let t = self.value(*table);
                    let mut d = Tensor::zeros(t.rows, t.cols);
                    for (i, &id) in ids.iter().enumerate() {
                        let src = g.row(i);
                        let dst = d.row_mut(id);
                        for (o, v) in dst.iter_mut().zip(src) {
                            *o += v;
                        }
                    }
                    acc(grads, *table, d);
                }
            }
            Op::SliceRows { x, start, len } => {
                if self.needs(*x) {
                    let t = self.value(*x);
                    let mut d = Tensor::zeros(t.rows, t.cols);
                    d.data[start * t.cols..(start + len) * t.cols].copy_from_slice(&g.data);
                    acc(grads, *x, d);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    if self.needs(p) {
                        let d = Tensor {
                            rows: t.rows,
                            cols: t.cols,
                            data: g.data[off * t.cols..(off + t.rows) * t.cols].to_vec(),
                        };
                        acc(grads, p, d);
                    }
                    off += t.rows;
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.needs(*x) {
                    let t = self.value(*x);
                    let mut d = Tensor::zeros(t.rows, t.cols);
                    for i in 0..t.rows {
                        d.row_mut(i)[*start..start + len].copy_from_slice(g.row(i));
                    }
                    acc(grads, *x, d);
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows;
                let mut off = 0;
                for &p in parts {
                    let t = self.value(p);
                    if self.needs(p) {
                        let mut d = Tensor::zeros(t.rows, t.cols);
                        for i in 0..rows {
                            d.row_mut(i).copy_from_slice(&g.row(i)[off..off + t.cols]);
                        }
                        acc(grads, p, d);
                    }
                    off += t.cols;
                }
            }
            Op::SoftmaxXent { logits, targets } => {
                if self.needs(*logits) {
                    let t = self.value(*logits);
                    let scale = g.item() / targets.len() as f64;
                    let mut d = Tensor::zeros(t.rows, t.cols);
                    for (i, &cls) in targets.iter().enumerate() {
                        let out = d.row_mut(i);
                        out.copy_from_slice(t.row(i));
                        softmax_row(out);
                        for v in out.iter_mut() {
                            *v *= scale;
                        }
                        out[cls] -= scale;
                    }
                    acc(grads, *logits, d);
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(t) => t.add_scaled(&delta, 1.0),
        slot => *slot = Some(delta),
    }
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Mean and 1/√(var+ε) of one row, biased variance.
fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

use std::collections::HashMap;

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc};
use crate::{NdiffError, Result, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Row-major boolean mask for [`Tape::softmax_rows`]; `true` means the entry
/// takes part in the softmax. Every row needs at least one `true`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttnMask {
    pub fn new(rows: usize, cols: usize, allow: Vec<bool>) -> Self {
        assert_eq!(allow.len(), rows * cols);
        Self { rows, cols, allow }
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![true; rows * cols])
    }

    pub fn causal(n: usize) -> Self {
        let allow = (0..n * n).map(|k| k % n <= k / n).collect();
        Self::new(n, n, allow)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn allowed(&self, r: usize, c: usize) -> bool {
        self.allow[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.allow[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.allow[r * self.cols..(r + 1) * self.cols]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Sin(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Records a forward computation so gradients can be replayed in reverse.
///
/// Nodes are appended in execution order, which is already a topological
/// order; backward walks the vector from the end.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> NdiffError {
    NdiffError::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A free input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        if bv.rows() != k {
            return Err(shape_err("matmul", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(out, m, n), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = (av.rows(), av.cols(), bv.rows());
        if bv.cols() != k {
            return Err(shape_err("matmul_nt", av, bv));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(av.data(), bv.data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(out, m, n), Op::MatMulNt(a, b), rg))
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        mk: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err(op, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, mk(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// `x[r×c] + bias[1×c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.len() != c {
            return Err(shape_err("add_row", xv, bv));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(bv.data()).for_each(|(o, b)| *o += b);
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.map(x, |v| v * k);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, k), rg)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let xv = self.value(x);
        Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|v| f(*v)).collect())
            .expect("same length")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        let rg = self.rg(x);
        self.push(t, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        let rg = self.rg(x);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::sin);
        let rg = self.rg(x);
        self.push(t, Op::Sin(x), rg)
    }

    /// Row-wise softmax over the last dimension, optionally restricted by a
    /// mask (masked entries come out as exactly zero).
    pub fn softmax_rows(&mut self, x: Var, mask: Option<&AttnMask>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if let Some(m) = mask {
            if m.rows() != r || m.cols() != c {
                return Err(NdiffError::Shape {
                    op: "softmax_rows mask",
                    left: xv.shape().to_vec(),
                    right: vec![m.rows(), m.cols()],
                });
            }
        }
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let allow = |j: usize| mask.map_or(true, |m| m.allowed(i, j));
            softmax_into(row, &mut out[i * c..(i + 1) * c], allow);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Softmax(x), rg))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        self.softmax_rows(x, None)
    }

    /// Row-wise layer normalization with learned gain and bias (`[1×c]` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let (r, c) = (xv.rows(), xv.cols());
        if gv.len() != c || bv.len() != c {
            return Err(shape_err("layer_norm", xv, gv));
        }
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Selects rows `idx` of `x` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(NdiffError::Index {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(xv.row(i));
        }
        let t = Tensor::from_vec(data, idx.len(), c);
        let rg = self.rg(x);
        Ok(self.push(
            t,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Embedding lookup: rows of `table` for each token id.
    pub fn embed_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = match parts.first() {
            Some(&p) => self.value(p).cols(),
            None => {
                return Err(NdiffError::Shape {
                    op: "concat_rows",
                    left: vec![],
                    right: vec![],
                })
            }
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(shape_err("concat_rows", self.value(parts[0]), pv));
            }
            rows += pv.rows();
            data.extend_from_slice(pv.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec(data, rows, c), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean cross-entropy of `softmax(logits[row])` against `class` over the
    /// listed `(row, class)` targets. Rows not listed do not contribute.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let lv = self.value(logits);
        let (r, c) = (lv.rows(), lv.cols());
        let mut probs = vec![0.0; targets.len() * c];
        let mut total = 0.0;
        for (k, &(row, class)) in targets.iter().enumerate() {
            if row >= r || class >= c {
                return Err(NdiffError::Index {
                    op: "cross_entropy",
                    index: row.max(class),
                    len: r.min(c),
                });
            }
            let p = &mut probs[k * c..(k + 1) * c];
            softmax_into(lv.row(row), p, |_| true);
            total -= log_softmax_at(lv.row(row), class);
        }
        let n = targets.len().max(1) as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NdiffError::NotScalar(lv.shape().to_vec()));
        }
        self.backward_seeded(loss, &Tensor::scalar(1.0))
    }

    /// Reverse pass from an arbitrary node with upstream gradient `seed`. Used
    /// when the loss gradient with respect to `out` is known analytically.
    pub fn backward_seeded(&self, out: Var, seed: &Tensor) -> Result<Gradients> {
        let ov = self.value(out);
        if ov.len() != seed.len() {
            return Err(shape_err("backward seed", ov, seed));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed.data().to_vec());
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let mut params = ParamGrads::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, &grads[i]) {
                params.accumulate(id, g);
            }
        }
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let len = nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                // dA = G·Bᵀ, dB = Aᵀ·G
                acc(*a, &mut |da| gemm_nt_acc(g, bv.data(), da, m, n, k));
                acc(*b, &mut |db| gemm_tn_acc(av.data(), g, db, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (av.rows(), av.cols(), bv.rows());
                // out = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                acc(*a, &mut |da| gemm_acc(g, bv.data(), da, m, n, k));
                acc(*b, &mut |db| gemm_tn_acc(g, av.data(), db, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * bv[k];
                    }
                });
                acc(*b, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * av[k];
                    }
                });
            }
            Op::AddRow(x, bias) => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    let c = d.len();
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale(x, k) => acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(o, v)| *o += k * v)),
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        if xv[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * y[k] * (1.0 - y[k]);
                    }
                });
            }
            Op::Sin(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |d| {
                    for k in 0..d.len() {
                        d[k] += g[k] * xv[k].cos();
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = y.cols();
                acc(*x, &mut |d| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            d[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = nodes[gain.0].value.data();
                let c = gv.len();
                let r = inv_std.len();
                acc(*x, &mut |d| {
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let k = inv_std[i] / c as f64;
                        for j in 0..c {
                            d[i * c + j] += k * (c as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                });
                acc(*gain, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[j] += g[i * c + j] * xhat[i * c + j];
                        }
                    }
                });
                acc(*bias, &mut |d| {
                    for row in g.chunks(c) {
                        add_into(d, row);
                    }
                });
            }
            Op::Gather { x, idx } => {
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |d| {
                    for (k, &row) in idx.iter().enumerate() {
                        add_into(&mut d[row * c..(row + 1) * c], &g[k * c..(k + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    acc(*p, &mut |d| add_into(d, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = nodes[logits.0].value.cols();
                let n = targets.len().max(1) as f64;
                acc(*logits, &mut |d| {
                    for (k, &(row, class)) in targets.iter().enumerate() {
                        let p = &probs[k * c..(k + 1) * c];
                        for j in 0..c {
                            let onehot = if j == class { 1.0 } else { 0.0 };
                            d[row * c + j] += g[0] * (p[j] - onehot) / n;
                        }
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of `row` into `out`, zero where `allow` is false.
pub fn softmax_into(row: &[f64], out: &mut [f64], allow: impl Fn(usize) -> bool) {
    let max = row
        .iter()
        .enumerate()
        .filter(|(j, _)| allow(*j))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        *o = if allow(j) { (row[j] - max).exp() } else { 0.0 };
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// `log softmax(row)[class]`
pub fn log_softmax_at(row: &[f64], class: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row[class] - lse
}

/// Result of a reverse pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient with respect to a recorded node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

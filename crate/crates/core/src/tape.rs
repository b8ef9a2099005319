//! Reverse-mode differentiation over a flat tape of tensor-valued nodes.
//!
//! A [`Tape`] records every forward op together with whatever it needs for
//! the backward pass. Parameters enter through [`Tape::param`], which reads
//! the current value from a [`ParamSet`]; frozen entries become constants and
//! never receive a gradient. [`Tape::backward`] walks the nodes in reverse and
//! returns [`Gradients`], which can be folded into the parameter set.
//!
//! Only the operations the model needs are provided. All matrices are 2-D,
//! bias/affine vectors are 1-D with the column count, and losses are `[1]`.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Coarse op identity, used for fault injection and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Transpose,
    Add,
    Sub,
    Mul,
    Scale,
    AddRow,
    MulRow,
    Softmax,
    LayerNorm,
    Gelu,
    SliceCols,
    ConcatCols,
    ConcatRows,
    SelectRows,
    Reshape,
    MaskedCrossEntropy,
    Mse,
    Sum,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::MatMul,
        OpKind::Transpose,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddRow,
        OpKind::MulRow,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Gelu,
        OpKind::SliceCols,
        OpKind::ConcatCols,
        OpKind::ConcatRows,
        OpKind::SelectRows,
        OpKind::Reshape,
        OpKind::MaskedCrossEntropy,
        OpKind::Mse,
        OpKind::Sum,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddRow => "add_row",
            OpKind::MulRow => "mul_row",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Gelu => "gelu",
            OpKind::SliceCols => "slice_cols",
            OpKind::ConcatCols => "concat_cols",
            OpKind::ConcatRows => "concat_rows",
            OpKind::SelectRows => "select_rows",
            OpKind::Reshape => "reshape",
            OpKind::MaskedCrossEntropy => "masked_cross_entropy",
            OpKind::Mse => "l2_loss",
            OpKind::Sum => "sum",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    Reshape(Var),
    MaskedCe {
        logits: Var,
        labels: Vec<usize>,
        active: Vec<usize>,
        probs: Vec<f64>,
    },
    Mse(Var, Var),
    Sum(Var),
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddRow(..) => OpKind::AddRow,
            Op::MulRow(..) => OpKind::MulRow,
            Op::Softmax(_) => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Gelu(_) => OpKind::Gelu,
            Op::SliceCols { .. } => OpKind::SliceCols,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::SelectRows { .. } => OpKind::SelectRows,
            Op::Reshape(_) => OpKind::Reshape,
            Op::MaskedCe { .. } => OpKind::MaskedCrossEntropy,
            Op::Mse(..) => OpKind::Mse,
            Op::Sum(_) => OpKind::Sum,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Single-threaded; build one per step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: the backward rule of `kind` is scaled by 1.5, which any
    /// gradient check must catch.
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            fault: Some(kind),
            ..Self::default()
        }
    }

    pub fn set_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `[1]` node (losses).
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.zero_grad();
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; never differentiated.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that gradients are tracked for, without a backing parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a named parameter. Repeated calls return the same node, so
    /// gradients from every use accumulate in one place.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let p = params.get(name)?;
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.params.insert(name.to_string(), v);
        if p.trainable {
            self.param_order.push((name.to_string(), v));
        }
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (m, n) = (s[0], s[1]);
        let t = Tensor::new(vec![n, m], transpose_raw(self.value(a).data(), m, n))?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Transpose(a), ng))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same length");
        let ng = self.needs(a);
        self.push(t, Op::Scale(a, c), ng)
    }

    fn row_broadcast(&mut self, x: Var, v: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (tx, tv) = (self.value(x), self.value(v));
        let c = tx.cols();
        if tx.shape().len() != 2 || tv.len() != c {
            return Err(Error::shape(op, tx.shape(), tv.shape()));
        }
        let vd = tv.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| f(*a, vd[i % c]))
            .collect();
        Tensor::new(tx.shape().to_vec(), data)
    }

    /// `x + bias` with `bias` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let t = self.row_broadcast(x, bias, "add_row", |a, b| a + b)?;
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddRow(x, bias), ng))
    }

    /// `x * g` with `g` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let t = self.row_broadcast(x, g, "mul_row", |a, b| a * b)?;
        let ng = self.needs(x) || self.needs(g);
        Ok(self.push(t, Op::MulRow(x, g), ng))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 {
            return Err(Error::shape("softmax", tx.shape(), &[]));
        }
        let t = Tensor::new(tx.shape().to_vec(), softmax_raw(tx.data(), tx.cols()))?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if tx.shape().len() != 2 || d == 0 {
            return Err(Error::shape("layer_norm", tx.shape(), &[]));
        }
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::shape("layer_norm", tx.shape(), self.value(gamma).shape()));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                xhat[r * d + j] = (row[j] - mean) * s;
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, h)| h * g[i % d] + b[i % d])
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| gelu_scalar(v)).collect();
        let t = Tensor::new(tx.shape().to_vec(), data).expect("same length");
        let ng = self.needs(x);
        self.push(t, Op::Gelu(x), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.cols();
        if tx.shape().len() != 2 || start + len > c {
            return Err(Error::shape("slice_cols", tx.shape(), &[start, len]));
        }
        let mut data = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            data.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let t = Tensor::new(vec![tx.rows(), len], data)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = parts
            .first()
            .map(|&p| self.value(p).rows())
            .ok_or_else(|| Error::Input("concat_cols of nothing".into()))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", &[rows], s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let t = Tensor::new(vec![rows, total], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::Input("concat_rows of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows", &[cols], s));
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, cols], data)?;
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Gathers rows by index; indices may repeat.
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x).select_rows(idx)?;
        let ng = self.needs(x);
        Ok(self.push(
            t,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// Mean over rows of `-log softmax(logits[active])[label]`. Columns outside
    /// `active` are never read, so they cannot influence the loss.
    pub fn masked_cross_entropy(&mut self, logits: Var, labels: &[usize], active: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape().len() != 2 || tl.rows() != labels.len() {
            return Err(Error::shape("masked_cross_entropy", tl.shape(), &[labels.len()]));
        }
        let c = tl.cols();
        let mut active = active.to_vec();
        active.sort_unstable();
        active.dedup();
        if active.is_empty() {
            return Err(Error::Input("empty active class set".into()));
        }
        if let Some(&bad) = active.iter().find(|&&a| a >= c) {
            return Err(Error::Input(format!("active class {bad} outside {c} logits")));
        }
        let mut probs = vec![0.0; labels.len() * active.len()];
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let pos = active
                .binary_search(&y)
                .map_err(|_| Error::Input(format!("label {y} not in active class set")))?;
            let row = tl.row(r);
            let m = active.iter().map(|&a| row[a]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (i, &a) in active.iter().enumerate() {
                let e = (row[a] - m).exp();
                probs[r * active.len() + i] = e;
                z += e;
            }
            for p in &mut probs[r * active.len()..(r + 1) * active.len()] {
                *p /= z;
            }
            total += m + z.ln() - row[active[pos]];
        }
        let loss = total / labels.len() as f64;
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedCe {
                logits,
                labels: labels.to_vec(),
                active,
                probs,
            },
            ng,
        ))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape("l2_loss", ta.shape(), tb.shape()));
        }
        let n = ta.len().max(1) as f64;
        let v = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::scalar(v), Op::Mse(a, b), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(v), Op::Sum(a), ng)
    }

    /// Propagates d(root)/d(node) for every node that depends on a tracked
    /// leaf. `root` must be a `[1]` scalar.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", self.shape(root), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let factor = match (self.fault, node.op.kind()) {
                (Some(f), Some(k)) if f == k => 1.5,
                _ => 1.0,
            };
            self.backward_node(node, &g, factor, &mut grads);
            grads[i] = Some(g);
        }

        Ok(Gradients {
            grads,
            params: self.param_order.clone(),
        })
    }

    fn backward_node(&self, node: &Node, g: &[f64], factor: f64, grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = &mut grads[v.0];
            match slot {
                Some(s) => s.iter_mut().zip(&contrib).for_each(|(a, b)| *a += factor * b),
                None => {
                    *slot = Some(if factor == 1.0 {
                        contrib
                    } else {
                        contrib.into_iter().map(|v| v * factor).collect()
                    })
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    // g (m×n) · bᵀ (n×k)
                    let bt = transpose_raw(tb.data(), k, n);
                    acc(*a, matmul_raw(g, &bt, m, n, k));
                }
                if self.needs(*b) {
                    let at = transpose_raw(ta.data(), m, k);
                    acc(*b, matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                acc(*a, transpose_raw(g, s[0], s[1]));
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    acc(*a, g.iter().zip(tb).map(|(x, y)| x * y).collect());
                }
                if self.needs(*b) {
                    acc(*b, g.iter().zip(ta).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
            Op::AddRow(x, bias) => {
                let c = node.value.cols();
                acc(*x, g.to_vec());
                if self.needs(*bias) {
                    acc(*bias, column_sums(g, c));
                }
            }
            Op::MulRow(x, gv) => {
                let c = node.value.cols();
                let (tx, tg) = (self.value(*x).data(), self.value(*gv).data());
                if self.needs(*x) {
                    acc(*x, g.iter().enumerate().map(|(i, v)| v * tg[i % c]).collect());
                }
                if self.needs(*gv) {
                    let prod: Vec<f64> = g.iter().zip(tx).map(|(a, b)| a * b).collect();
                    acc(*gv, column_sums(&prod, c));
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut out = vec![0.0; y.len()];
                for r in 0..node.value.rows() {
                    let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[r * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*x, out);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gm = self.value(*gamma).data();
                if self.needs(*gamma) {
                    let prod: Vec<f64> = g.iter().zip(xhat).map(|(a, b)| a * b).collect();
                    acc(*gamma, column_sums(&prod, d));
                }
                if self.needs(*beta) {
                    acc(*beta, column_sums(g, d));
                }
                if self.needs(*x) {
                    let mut out = vec![0.0; g.len()];
                    for (r, s) in rstd.iter().enumerate() {
                        let gh: Vec<f64> = (0..d).map(|j| g[r * d + j] * gm[j]).collect();
                        let xh = &xhat[r * d..(r + 1) * d];
                        let mean_gh = gh.iter().sum::<f64>() / d as f64;
                        let mean_ghx = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            out[r * d + j] = s * (gh[j] - mean_gh - xh[j] * mean_ghx);
                        }
                    }
                    acc(*x, out);
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                acc(*x, g.iter().zip(tx).map(|(a, v)| a * gelu_grad(*v)).collect());
            }
            Op::SliceCols { x, start } => {
                let tx = self.value(*x);
                let (c, len) = (tx.cols(), node.value.cols());
                let mut out = vec![0.0; tx.len()];
                for r in 0..tx.rows() {
                    out[r * c + start..r * c + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                acc(*x, out);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let rows = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.needs(p) {
                        let mut out = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            out.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, out);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.needs(p) {
                        acc(p, g[offset..offset + n].to_vec());
                    }
                    offset += n;
                }
            }
            Op::SelectRows { x, idx } => {
                let tx = self.value(*x);
                let c = tx.cols();
                let mut out = vec![0.0; tx.len()];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        out[i * c + j] += g[k * c + j];
                    }
                }
                acc(*x, out);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::MaskedCe {
                logits,
                labels,
                active,
                probs,
            } => {
                let tl = self.value(*logits);
                let c = tl.cols();
                let b = labels.len() as f64;
                let mut out = vec![0.0; tl.len()];
                for (r, &y) in labels.iter().enumerate() {
                    for (i, &a) in active.iter().enumerate() {
                        let target = if a == y { 1.0 } else { 0.0 };
                        out[r * c + a] = g[0] * (probs[r * active.len() + i] - target) / b;
                    }
                }
                acc(*logits, out);
            }
            Op::Mse(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let n = ta.len().max(1) as f64;
                let d: Vec<f64> = ta.iter().zip(tb).map(|(x, y)| 2.0 * (x - y) / n * g[0]).collect();
                if self.needs(*b) {
                    acc(*b, d.iter().map(|v| -v).collect());
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![g[0]; n]);
            }
        }
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient for a named trainable parameter; `None` when the parameter
    /// was frozen or unused.
    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.of(*v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|(n, _)| n.as_str())
    }

    /// Adds every parameter gradient into the parameter set's grad slots.
    pub fn accumulate_into(&self, params: &mut ParamSet) -> Result<()> {
        for (name, v) in &self.params {
            if let Some(g) = self.of(*v) {
                params.accumulate(name, g)?;
            }
        }
        Ok(())
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn column_sums(g: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for (i, v) in g.iter().enumerate() {
        out[i % c] += v;
    }
    out
}

pub(crate) fn softmax_raw(x: &[f64], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    if c == 0 {
        return out;
    }
    for (row, orow) in x.chunks(c).zip(out.chunks_mut(c)) {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (o, v) in orow.iter_mut().zip(row) {
            *o = (v - m).exp();
            z += *o;
        }
        orow.iter_mut().for_each(|o| *o /= z);
    }
    out
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    cdf + x * FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_basis() {
        let mut tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let out = tape.matmul(i, m).unwrap();
        assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[&[1.0, 0.0]]));
        let b = tape.constant(t(&[&[5.0], &[7.0]]));
        let out = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(out).data(), &[5.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[&[0.0, 0.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for c in [-7.0, 0.0, 3.5, 120.0] {
            let x = tape.constant(t(&[&[c, c + 2f64.ln()]]));
            let y = tape.softmax_rows(x).unwrap();
            let d = tape.value(y).data();
            assert!((d[0] - 1.0 / 3.0).abs() < 1e-12);
            assert!((d[1] - 2.0 / 3.0).abs() < 1e-12);
        }
        let x = tape.constant(t(&[&[1000.0, 0.0]]));
        let y = tape.softmax_rows(x).unwrap();
        let d = tape.value(y).data();
        assert!(d.iter().all(|v| v.is_finite()));
        assert!((d[0] - 1.0).abs() < 1e-15 && d[1] < 1e-300);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::filled(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[&[1.0, 3.0]]));
        let y = tape.layer_norm(x, g, b, 1e-14).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-9 && (d[1] - 1.0).abs() < 1e-9);

        let g = tape.constant(Tensor::filled(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[&[5.0, 5.0, 5.0]]));
        let y = tape.layer_norm(x, g, b, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn gelu_asymptotes() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-12);
        assert!(gelu_scalar(-10.0).abs() < 1e-12);
    }

    #[test]
    fn masked_ce_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[&[0.3, 0.3, 9.0]]));
        let loss = tape.masked_cross_entropy(l, &[0], &[0, 1]).unwrap();
        assert!((tape.scalar(loss) - 2f64.ln()).abs() < 1e-15);

        let l = tape.constant(t(&[&[50.0, 0.0]]));
        let loss = tape.masked_cross_entropy(l, &[0], &[0, 1]).unwrap();
        assert!(tape.scalar(loss) < 1e-20);

        let base = tape.constant(t(&[&[0.1, -0.4, 2.0]]));
        let huge = tape.constant(t(&[&[0.1, -0.4, 1e6]]));
        let a = tape.masked_cross_entropy(base, &[1], &[0, 1]).unwrap();
        let b = tape.masked_cross_entropy(huge, &[1], &[0, 1]).unwrap();
        assert_eq!(tape.scalar(a).to_bits(), tape.scalar(b).to_bits());

        let l = tape.constant(t(&[&[0.0, 0.0, 0.0]]));
        assert!(matches!(
            tape.masked_cross_entropy(l, &[2], &[0, 1]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn masked_ce_gradient_zero_outside_active() {
        let mut tape = Tape::new();
        let l = tape.variable(t(&[&[0.1, -0.4, 2.0, 0.7]]));
        let loss = tape.masked_cross_entropy(l, &[1], &[0, 1, 3]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.of(l).unwrap()[2], 0.0);
    }

    #[test]
    fn l2_loss_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[&[0.0, 0.0]]));
        let b = tape.constant(t(&[&[3.0, 4.0]]));
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.scalar(l), 12.5);
        let l = tape.mse(b, b).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        let c = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(tape.mse(a, c).is_err());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::filled(&[1, 2], 1.0), false).unwrap();
        ps.insert("v", Tensor::filled(&[1, 2], 2.0), true).unwrap();
        let mut tape = Tape::new();
        let w = tape.param(&ps, "w").unwrap();
        let v = tape.param(&ps, "v").unwrap();
        let p = tape.mul(w, v).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert!(g.param("w").is_none());
        assert_eq!(g.param("v").unwrap(), &[1.0, 1.0]);
    }
}

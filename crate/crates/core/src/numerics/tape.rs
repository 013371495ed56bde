//! Tape-based reverse-mode differentiation.
//!
//! Every forward op appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes only ever reference earlier nodes, so
//! the tape is topologically ordered by construction and `backward` is a
//! single reverse sweep. Tensors are treated as `[rows, cols]` where `cols`
//! is the last extent unless an op says otherwise.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm, MatRef};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// First extent.
    Rows,
    /// Last extent.
    Cols,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    BatchMatMul { a: usize, b: usize, transpose_b: bool },
    Add { a: usize, b: usize, broadcast: bool },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    MulConst { a: usize, factor: Vec<f64> },
    Concat { inputs: Vec<usize>, axis: Axis },
    Embedding { table: usize, ids: Vec<usize> },
    Sigmoid { a: usize },
    Tanh { a: usize },
    Relu { a: usize },
    Softmax { a: usize },
    LogSoftmax { a: usize },
    Conv1d { input: usize, weight: usize, bias: usize, width: usize },
    MaxPool { a: usize, argmax: Vec<usize> },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<f64>, probs: Vec<f64> },
    Slice { a: usize, axis: Axis, start: usize },
    Reshape { a: usize },
    Stack { inputs: Vec<usize> },
    SelectRows { new: usize, old: usize, keep_new: Vec<bool> },
    Sum { a: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "elementwise_mul",
            Op::MulConst { .. } => "mul_const",
            Op::Concat { .. } => "concat",
            Op::Embedding { .. } => "embedding_lookup",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxPool { .. } => "max_over_time_pool",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Slice { .. } => "slice",
            Op::Reshape { .. } => "reshape",
            Op::Stack { .. } => "stack",
            Op::SelectRows { .. } => "select_rows",
            Op::Sum { .. } => "sum",
        }
    }
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation for one forward/backward cycle.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

fn cols_of(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

fn rows_of(shape: &[usize]) -> usize {
    let c = cols_of(shape);
    if c == 0 {
        0
    } else {
        shape.iter().product::<usize>() / c
    }
}

fn grad_buf<'g>(nodes: &[Node], grads: &'g mut [Option<Vec<f64>>], j: usize) -> Option<&'g mut Vec<f64>> {
    if !nodes[j].requires_grad {
        return None;
    }
    Some(grads[j].get_or_insert_with(|| vec![0.0; nodes[j].value.len()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (d, s) in dst.iter_mut().zip(src) {
        *d = libm::exp(s - max);
        sum += *d;
    }
    for d in dst.iter_mut() {
        *d /= sum;
    }
}

fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = src.iter().map(|s| libm::exp(s - max)).sum();
    let lse = max + libm::log(sum);
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s - lse;
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

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape matches its value")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn req(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a copy of `t`; it receives a gradient iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Result<Var> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("constant", format!("{:?} vs {} values", shape, data.len())));
        }
        self.push(shape.to_vec(), data, Op::Leaf, false)
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shapes("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            MatRef::row_major(self.value(a), m, k),
            MatRef::row_major(self.value(b), k, n),
            &mut out,
            0.0,
        );
        let rg = self.req(&[a, b]);
        self.push(vec![m, n], out, Op::MatMul { a: a.0, b: b.0 }, rg)
    }

    /// Batched product: `[B,m,k] · [B,k,n] → [B,m,n]`; with `transpose_b`
    /// the right operand is stored as `[B,n,k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::shapes("batch_matmul", &[sa, sb]));
        }
        let (bsz, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(Error::shapes("batch_matmul", &[sa, sb]));
        }
        let mut out = vec![0.0; bsz * m * n];
        let (av, bv) = (self.value(a), self.value(b));
        for i in 0..bsz {
            let ai = MatRef::row_major(&av[i * m * k..(i + 1) * m * k], m, k);
            let braw = &bv[i * k * n..(i + 1) * k * n];
            let bi = if transpose_b {
                MatRef::row_major(braw, n, k).t()
            } else {
                MatRef::row_major(braw, k, n)
            };
            gemm(ai, bi, &mut out[i * m * n..(i + 1) * m * n], 0.0);
        }
        let rg = self.req(&[a, b]);
        self.push(vec![bsz, m, n], out, Op::BatchMatMul { a: a.0, b: b.0, transpose_b }, rg)
    }

    /// Elementwise sum. `b` may also be a row vector (`[n]` or `[1,n]`)
    /// broadcast over every row of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b));
        let broadcast = if sa.as_slice() == sb {
            false
        } else if sb.iter().product::<usize>() == cols_of(&sa) && cols_of(sb) == cols_of(&sa) {
            true
        } else {
            return Err(Error::shapes("add", &[&sa, sb]));
        };
        let mut out = self.value(a).to_vec();
        let bv = self.value(b);
        if broadcast {
            let c = cols_of(&sa);
            if c > 0 {
                for row in out.chunks_mut(c) {
                    add_into(row, bv);
                }
            }
        } else {
            add_into(&mut out, bv);
        }
        let rg = self.req(&[a, b]);
        self.push(sa, out, Op::Add { a: a.0, b: b.0, broadcast }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shapes("sub", &[self.shape(a), self.shape(b)]));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let rg = self.req(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Sub { a: a.0, b: b.0 }, rg)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shapes("elementwise_mul", &[self.shape(a), self.shape(b)]));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.req(&[a, b]);
        self.push(self.shape(a).to_vec(), out, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    /// Elementwise product with a constant factor (dropout masks, scaling).
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Result<Var> {
        if factor.len() != self.value(a).len() {
            return Err(Error::shape(
                "mul_const",
                format!("{:?} vs {} factors", self.shape(a), factor.len()),
            ));
        }
        let out = self.value(a).iter().zip(&factor).map(|(x, f)| x * f).collect();
        let rg = self.req(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::MulConst { a: a.0, factor }, rg)
    }

    /// Concatenates along the first (`Rows`) or last (`Cols`) extent.
    pub fn concat(&mut self, inputs: &[Var], axis: Axis) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return Err(Error::shape("concat", "no inputs")),
        };
        let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.shape(*v)).collect();
        let (shape, out) = match axis {
            Axis::Rows => {
                let tail = &first[1..];
                if shapes.iter().any(|s| s.is_empty() || &s[1..] != tail) {
                    return Err(Error::shapes("concat", &shapes));
                }
                let mut shape = first.clone();
                shape[0] = shapes.iter().map(|s| s[0]).sum();
                let mut out = Vec::with_capacity(shape.iter().product());
                for v in inputs {
                    out.extend_from_slice(self.value(*v));
                }
                (shape, out)
            }
            Axis::Cols => {
                let rows = rows_of(&first);
                let lead = &first[..first.len() - 1];
                if shapes.iter().any(|s| s.is_empty() || &s[..s.len() - 1] != lead) {
                    return Err(Error::shapes("concat", &shapes));
                }
                let widths: Vec<usize> = shapes.iter().map(|s| cols_of(s)).collect();
                let total: usize = widths.iter().sum();
                let mut out = Vec::with_capacity(rows * total);
                for r in 0..rows {
                    for (v, &w) in inputs.iter().zip(&widths) {
                        out.extend_from_slice(&self.value(*v)[r * w..(r + 1) * w]);
                    }
                }
                let mut shape = first.clone();
                *shape.last_mut().expect("non-empty shape") = total;
                (shape, out)
            }
        };
        let rg = self.req(inputs);
        let inputs = inputs.iter().map(|v| v.0).collect();
        self.push(shape, out, Op::Concat { inputs, axis }, rg)
    }

    /// Gathers rows of a `[V,d]` table: `→ [ids.len(), d]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 {
            return Err(Error::shapes("embedding_lookup", &[st]));
        }
        let (vocab, d) = (st[0], st[1]);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::shape("embedding_lookup", format!("id {} outside table of {} rows", bad, vocab)));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let rg = self.req(&[table]);
        self.push(vec![ids.len(), d], out, Op::Embedding { table: table.0, ids: ids.to_vec() }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.req(&[a]);
        self.push(self.shape(a).to_vec(), out, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(a, sigmoid, Op::Sigmoid { a: a.0 })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, libm::tanh, Op::Tanh { a: a.0 })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu { a: a.0 })
    }

    /// Row-wise softmax over the last extent.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = cols_of(&shape);
        let mut out = vec![0.0; self.value(a).len()];
        if c > 0 {
            for (src, dst) in self.value(a).chunks(c).zip(out.chunks_mut(c)) {
                softmax_row(src, dst);
            }
        }
        let rg = self.req(&[a]);
        self.push(shape, out, Op::Softmax { a: a.0 }, rg)
    }

    /// Row-wise log-softmax over the last extent.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = cols_of(&shape);
        let mut out = vec![0.0; self.value(a).len()];
        if c > 0 {
            for (src, dst) in self.value(a).chunks(c).zip(out.chunks_mut(c)) {
                log_softmax_row(src, dst);
            }
        }
        let rg = self.req(&[a]);
        self.push(shape, out, Op::LogSoftmax { a: a.0 }, rg)
    }

    /// One-dimensional valid convolution of `[B,L,d]` with a filter bank
    /// `[width·d, n_f]` plus bias `[n_f]`: `→ [B, L−width+1, n_f]`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var, width: usize) -> Result<Var> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        if si.len() != 3 || sw.len() != 2 || width == 0 || si[1] < width || sw[0] != width * si[2] || sb.iter().product::<usize>() != sw[1]
        {
            return Err(Error::shapes("conv1d", &[si, sw, sb]));
        }
        let (bsz, len, d) = (si[0], si[1], si[2]);
        let nf = sw[1];
        let windows = len - width + 1;
        let mut out = Vec::with_capacity(bsz * windows * nf);
        for _ in 0..bsz * windows {
            out.extend_from_slice(self.value(bias));
        }
        let (xv, wv) = (self.value(input), self.value(weight));
        let wmat = MatRef::row_major(wv, width * d, nf);
        for b in 0..bsz {
            let xs = &xv[b * len * d..(b + 1) * len * d];
            let windows_view = MatRef {
                data: xs,
                rows: windows,
                cols: width * d,
                rs: d,
                cs: 1,
            };
            gemm(windows_view, wmat, &mut out[b * windows * nf..(b + 1) * windows * nf], 1.0);
        }
        let rg = self.req(&[input, weight, bias]);
        self.push(
            vec![bsz, windows, nf],
            out,
            Op::Conv1d {
                input: input.0,
                weight: weight.0,
                bias: bias.0,
                width,
            },
            rg,
        )
    }

    /// Max over the time axis of `[B,T,F]`, looking only at the first
    /// `valid[b]` steps of each row: `→ [B,F]`. Ties go to the earliest step.
    pub fn max_over_time_pool(&mut self, a: Var, valid: &[usize]) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 3 || valid.len() != s[0] || valid.iter().any(|&v| v == 0 || v > s[1]) {
            return Err(Error::shape(
                "max_over_time_pool",
                format!("{:?} with valid lengths {:?}", s, valid),
            ));
        }
        let (bsz, t, f) = (s[0], s[1], s[2]);
        let av = self.value(a);
        let mut out = vec![f64::NEG_INFINITY; bsz * f];
        let mut argmax = vec![0usize; bsz * f];
        for b in 0..bsz {
            for step in 0..valid[b] {
                let row = &av[(b * t + step) * f..(b * t + step + 1) * f];
                for j in 0..f {
                    if row[j] > out[b * f + j] {
                        out[b * f + j] = row[j];
                        argmax[b * f + j] = step;
                    }
                }
            }
        }
        let rg = self.req(&[a]);
        self.push(vec![bsz, f], out, Op::MaxPool { a: a.0, argmax }, rg)
    }

    /// Weighted negative log-likelihood of `targets` under `softmax(logits)`,
    /// summed over rows: `Σ_i w_i · −log softmax(logits_i)[t_i]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[f64]>) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || targets.len() != s[0] || weights.is_some_and(|w| w.len() != s[0]) {
            return Err(Error::shape(
                "cross_entropy",
                format!("{:?} with {} targets", s, targets.len()),
            ));
        }
        let c = s[1];
        if let Some(bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::shape("cross_entropy", format!("target {} outside {} classes", bad, c)));
        }
        let weights = weights.map_or_else(|| vec![1.0; s[0]], |w| w.to_vec());
        let mut probs = vec![0.0; s[0] * c];
        let mut logp = vec![0.0; c];
        let mut loss = 0.0;
        for (i, row) in self.value(logits).chunks(c.max(1)).enumerate() {
            log_softmax_row(row, &mut logp);
            if weights[i] != 0.0 {
                loss -= weights[i] * logp[targets[i]];
            }
            for (p, l) in probs[i * c..(i + 1) * c].iter_mut().zip(&logp) {
                *p = libm::exp(*l);
            }
        }
        let rg = self.req(&[logits]);
        self.push(
            vec![1],
            vec![loss],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights,
                probs,
            },
            rg,
        )
    }

    /// Contiguous slice of `len` entries along the first or last extent.
    pub fn slice(&mut self, a: Var, axis: Axis, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let av = self.value(a);
        let (shape, out) = match axis {
            Axis::Rows => {
                if s.is_empty() || start + len > s[0] {
                    return Err(Error::shape("slice", format!("rows {}..{} of {:?}", start, start + len, s)));
                }
                let w: usize = s[1..].iter().product();
                let mut shape = s.clone();
                shape[0] = len;
                (shape, av[start * w..(start + len) * w].to_vec())
            }
            Axis::Cols => {
                let c = cols_of(&s);
                if s.is_empty() || start + len > c {
                    return Err(Error::shape("slice", format!("cols {}..{} of {:?}", start, start + len, s)));
                }
                let rows = rows_of(&s);
                let mut out = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    out.extend_from_slice(&av[r * c + start..r * c + start + len]);
                }
                let mut shape = s.clone();
                *shape.last_mut().expect("non-empty shape") = len;
                (shape, out)
            }
        };
        let rg = self.req(&[a]);
        self.push(shape, out, Op::Slice { a: a.0, axis, start }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shapes("reshape", &[self.shape(a), shape]));
        }
        let out = self.value(a).to_vec();
        let rg = self.req(&[a]);
        self.push(shape.to_vec(), out, Op::Reshape { a: a.0 }, rg)
    }

    /// Stacks `k` tensors of shape `[B,F]` into `[B,k,F]`.
    pub fn stack(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = match inputs.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return Err(Error::shape("stack", "no inputs")),
        };
        if first.len() != 2 || inputs.iter().any(|v| self.shape(*v) != first.as_slice()) {
            let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.shape(*v)).collect();
            return Err(Error::shapes("stack", &shapes));
        }
        let (bsz, f, k) = (first[0], first[1], inputs.len());
        let mut out = vec![0.0; bsz * k * f];
        for (j, v) in inputs.iter().enumerate() {
            let src = self.value(*v);
            for b in 0..bsz {
                out[(b * k + j) * f..(b * k + j + 1) * f].copy_from_slice(&src[b * f..(b + 1) * f]);
            }
        }
        let rg = self.req(inputs);
        let inputs = inputs.iter().map(|v| v.0).collect();
        self.push(vec![bsz, k, f], out, Op::Stack { inputs }, rg)
    }

    /// Row-wise choice: row `r` comes from `new` if `keep_new[r]`, else from `old`.
    pub fn select_rows(&mut self, new: Var, old: Var, keep_new: &[bool]) -> Result<Var> {
        let s = self.shape(new).to_vec();
        if self.shape(old) != s.as_slice() || s.is_empty() || keep_new.len() != s[0] {
            return Err(Error::shapes("select_rows", &[&s, self.shape(old)]));
        }
        let w: usize = s[1..].iter().product();
        let mut out = Vec::with_capacity(s[0] * w);
        for (r, &k) in keep_new.iter().enumerate() {
            let src = if k { self.value(new) } else { self.value(old) };
            out.extend_from_slice(&src[r * w..(r + 1) * w]);
        }
        let rg = self.req(&[new, old]);
        self.push(
            s,
            out,
            Op::SelectRows {
                new: new.0,
                old: old.0,
                keep_new: keep_new.to_vec(),
            },
            rg,
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let total = self.value(a).iter().sum();
        let rg = self.req(&[a]);
        self.push(vec![1], vec![total], Op::Sum { a: a.0 }, rg)
    }

    /// Propagates `∂loss/∂·` to every node that requires a gradient.
    /// Gradients of nodes used several times accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("tape already consumed by a backward pass".into()));
        }
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::Backward("loss is not recorded on this tape".into()));
        };
        if node.value.len() != 1 {
            return Err(Error::Backward(format!("loss must be scalar, got shape {:?}", node.shape)));
        }
        self.backward_done = true;
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop(i, &g);
            }
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        macro_rules! with_grad {
            ($j:expr, |$buf:ident| $body:expr) => {
                if let Some($buf) = grad_buf(nodes, grads, $j) {
                    $body
                }
            };
        }
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (sa, sb) = (&nodes[*a].shape, &nodes[*b].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let gm = MatRef::row_major(g, m, n);
                with_grad!(*a, |ga| gemm(gm, MatRef::row_major(&nodes[*b].value, k, n).t(), ga, 1.0));
                with_grad!(*b, |gb| gemm(MatRef::row_major(&nodes[*a].value, m, k).t(), gm, gb, 1.0));
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let sa = &nodes[*a].shape;
                let (bsz, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                with_grad!(*a, |ga| for t in 0..bsz {
                    let gt = MatRef::row_major(&g[t * m * n..(t + 1) * m * n], m, n);
                    let braw = &bv[t * k * n..(t + 1) * k * n];
                    // Bᵀ as an [n,k] view.
                    let bt = if *transpose_b {
                        MatRef::row_major(braw, n, k)
                    } else {
                        MatRef::row_major(braw, k, n).t()
                    };
                    gemm(gt, bt, &mut ga[t * m * k..(t + 1) * m * k], 1.0);
                });
                with_grad!(*b, |gb| for t in 0..bsz {
                    let gt = MatRef::row_major(&g[t * m * n..(t + 1) * m * n], m, n);
                    let at = MatRef::row_major(&av[t * m * k..(t + 1) * m * k], m, k);
                    let dst = &mut gb[t * k * n..(t + 1) * k * n];
                    if *transpose_b {
                        gemm(gt.t(), at, dst, 1.0);
                    } else {
                        gemm(at.t(), gt, dst, 1.0);
                    }
                });
            }
            Op::Add { a, b, broadcast } => {
                with_grad!(*a, |ga| add_into(ga, g));
                with_grad!(*b, |gb| if *broadcast {
                    let c = gb.len();
                    if c > 0 {
                        for row in g.chunks(c) {
                            add_into(gb, row);
                        }
                    }
                } else {
                    add_into(gb, g);
                });
            }
            Op::Sub { a, b } => {
                with_grad!(*a, |ga| add_into(ga, g));
                with_grad!(*b, |gb| gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                with_grad!(*a, |ga| for ((d, gg), y) in ga.iter_mut().zip(g).zip(bv) {
                    *d += gg * y;
                });
                with_grad!(*b, |gb| for ((d, gg), x) in gb.iter_mut().zip(g).zip(av) {
                    *d += gg * x;
                });
            }
            Op::MulConst { a, factor } => {
                with_grad!(*a, |ga| for ((d, gg), f) in ga.iter_mut().zip(g).zip(factor) {
                    *d += gg * f;
                });
            }
            Op::Concat { inputs, axis } => match axis {
                Axis::Rows => {
                    let mut off = 0;
                    for &j in inputs {
                        let n = nodes[j].value.len();
                        with_grad!(j, |gj| add_into(gj, &g[off..off + n]));
                        off += n;
                    }
                }
                Axis::Cols => {
                    let total = cols_of(&node.shape);
                    let rows = rows_of(&node.shape);
                    let mut col = 0;
                    for &j in inputs {
                        let w = cols_of(&nodes[j].shape);
                        with_grad!(j, |gj| for r in 0..rows {
                            add_into(&mut gj[r * w..(r + 1) * w], &g[r * total + col..r * total + col + w]);
                        });
                        col += w;
                    }
                }
            },
            Op::Embedding { table, ids } => {
                let d = nodes[*table].shape[1];
                with_grad!(*table, |gt| for (r, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                });
            }
            Op::Sigmoid { a } => {
                with_grad!(*a, |ga| for ((d, gg), y) in ga.iter_mut().zip(g).zip(&node.value) {
                    *d += gg * y * (1.0 - y);
                });
            }
            Op::Tanh { a } => {
                with_grad!(*a, |ga| for ((d, gg), y) in ga.iter_mut().zip(g).zip(&node.value) {
                    *d += gg * (1.0 - y * y);
                });
            }
            Op::Relu { a } => {
                with_grad!(*a, |ga| for ((d, gg), y) in ga.iter_mut().zip(g).zip(&node.value) {
                    if *y > 0.0 {
                        *d += gg;
                    }
                });
            }
            Op::Softmax { a } => {
                let c = cols_of(&node.shape);
                with_grad!(*a, |ga| if c > 0 {
                    for ((dr, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                        for ((d, gg), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += y * (gg - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let c = cols_of(&node.shape);
                with_grad!(*a, |ga| if c > 0 {
                    for ((dr, gr), yr) in ga.chunks_mut(c).zip(g.chunks(c)).zip(node.value.chunks(c)) {
                        let total: f64 = gr.iter().sum();
                        for ((d, gg), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d += gg - libm::exp(*y) * total;
                        }
                    }
                });
            }
            Op::Conv1d { input, weight, bias, width } => {
                let si = &nodes[*input].shape;
                let (bsz, len, d) = (si[0], si[1], si[2]);
                let nf = node.shape[2];
                let windows = len - width + 1;
                let (xv, wv) = (&nodes[*input].value, &nodes[*weight].value);
                with_grad!(*bias, |gb| for row in g.chunks(nf) {
                    add_into(gb, row);
                });
                with_grad!(*weight, |gw| for b in 0..bsz {
                    let xs = &xv[b * len * d..(b + 1) * len * d];
                    let view = MatRef {
                        data: xs,
                        rows: windows,
                        cols: width * d,
                        rs: d,
                        cs: 1,
                    };
                    let gb = MatRef::row_major(&g[b * windows * nf..(b + 1) * windows * nf], windows, nf);
                    gemm(view.t(), gb, gw, 1.0);
                });
                with_grad!(*input, |gx| {
                    let wt = MatRef::row_major(wv, width * d, nf).t();
                    let mut tmp = vec![0.0; windows * width * d];
                    for b in 0..bsz {
                        let gb = MatRef::row_major(&g[b * windows * nf..(b + 1) * windows * nf], windows, nf);
                        gemm(gb, wt, &mut tmp, 0.0);
                        let dst = &mut gx[b * len * d..(b + 1) * len * d];
                        for p in 0..windows {
                            add_into(&mut dst[p * d..p * d + width * d], &tmp[p * width * d..(p + 1) * width * d]);
                        }
                    }
                });
            }
            Op::MaxPool { a, argmax } => {
                let s = &nodes[*a].shape;
                let (t, f) = (s[1], s[2]);
                with_grad!(*a, |ga| for (idx, &step) in argmax.iter().enumerate() {
                    let (b, j) = (idx / f, idx % f);
                    ga[(b * t + step) * f + j] += g[idx];
                });
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let c = nodes[*logits].shape[1];
                let up = g[0];
                with_grad!(*logits, |gl| for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let row = &mut gl[r * c..(r + 1) * c];
                    for (d, p) in row.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
                        *d += up * w * p;
                    }
                    row[t] -= up * w;
                });
            }
            Op::Slice { a, axis, start } => {
                let s = &nodes[*a].shape;
                match axis {
                    Axis::Rows => {
                        let w: usize = s[1..].iter().product();
                        with_grad!(*a, |ga| add_into(&mut ga[start * w..start * w + g.len()], g));
                    }
                    Axis::Cols => {
                        let c = cols_of(s);
                        let len = cols_of(&node.shape);
                        let rows = rows_of(s);
                        with_grad!(*a, |ga| for r in 0..rows {
                            add_into(&mut ga[r * c + start..r * c + start + len], &g[r * len..(r + 1) * len]);
                        });
                    }
                }
            }
            Op::Reshape { a } => {
                with_grad!(*a, |ga| add_into(ga, g));
            }
            Op::Stack { inputs } => {
                let (bsz, k, f) = (node.shape[0], node.shape[1], node.shape[2]);
                for (j, &src) in inputs.iter().enumerate() {
                    with_grad!(src, |gs| for b in 0..bsz {
                        add_into(&mut gs[b * f..(b + 1) * f], &g[(b * k + j) * f..(b * k + j + 1) * f]);
                    });
                }
            }
            Op::SelectRows { new, old, keep_new } => {
                let w: usize = node.shape[1..].iter().product();
                with_grad!(*new, |gn| for (r, &k) in keep_new.iter().enumerate() {
                    if k {
                        add_into(&mut gn[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
                with_grad!(*old, |go| for (r, &k) in keep_new.iter().enumerate() {
                    if !k {
                        add_into(&mut go[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::Sum { a } => {
                let up = g[0];
                with_grad!(*a, |ga| ga.iter_mut().for_each(|d| *d += up));
            }
        }
    }
}

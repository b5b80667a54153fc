//! Reverse-mode differentiation over a linear tape.
//!
//! Every operation appends one node holding its forward value. `backward`
//! walks the tape from the end, visiting each node once and accumulating
//! gradient contributions into its operands.

use std::collections::{BTreeMap, BTreeSet};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Derivative of an elementwise map given `(input, output)`.
pub type ElementwiseDerivative = fn(f64, f64) -> f64;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log { x: usize, floor: f64 },
    Elementwise { x: usize, df: ElementwiseDerivative },
    Softmax { x: usize, temp: f64 },
    Conv1d { x: usize, w: usize, b: usize },
    MaxOverTime { x: usize, argmax: usize },
    SegmentMax { x: usize, argmax: Vec<usize> },
    Im2Col { x: usize, h: usize },
    Gather { table: usize, ids: Vec<usize> },
    ConcatCols(Vec<usize>),
    SliceCols { x: usize, start: usize },
    ConcatRows(Vec<usize>),
    StackSteps(Vec<usize>),
    Transpose(usize),
    Reshape(usize),
    SumAll(usize),
    MeanAll(usize),
    MeanRows(usize),
    Inverse(usize),
    Trace(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    PairwiseSqDist(usize, usize),
    L2Norm(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Confined to one thread for a forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    bindings: BTreeMap<String, Var>,
    frozen: BTreeSet<String>,
    inference: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    /// A graph on which every binding is a constant; `backward` is a no-op.
    pub fn inference() -> Self {
        Graph {
            inference: true,
            ..Graph::default()
        }
    }

    /// Parameters whose names start with `prefix` are bound as constants.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        self.frozen.insert(prefix.to_string());
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
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn variable(&mut self, value: Tensor) -> Var {
        let rg = !self.inference;
        self.push(value, Op::Leaf, rg)
    }

    /// Binds a named parameter, reusing the existing leaf if already bound.
    pub fn bind(&mut self, params: &BTreeMap<String, Tensor>, name: &str) -> Result<Var> {
        if let Some(v) = self.bindings.get(name) {
            return Ok(*v);
        }
        let value = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?
            .clone();
        let frozen = self.inference || self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = self.push(value, Op::Leaf, !frozen);
        self.bindings.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a.0).matmul(self.val(b.0))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::MatMul(a.0, b.0), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.val(a.0).transpose()?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Transpose(a.0), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.val(a.0).clone().reshape(shape)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Reshape(a.0), rg))
    }

    /// Inverse of a square matrix by Gauss-Jordan elimination with partial pivoting.
    pub fn inverse(&mut self, a: Var) -> Result<Var> {
        let out = invert(self.val(a.0))?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Inverse(a.0), rg))
    }

    pub fn trace(&mut self, a: Var) -> Result<Var> {
        let t = self.val(a.0);
        let (r, c) = t.dims2()?;
        if r != c {
            return Err(Error::shape(format!("trace of non-square {r}x{c}")));
        }
        let s = (0..r).map(|i| t.data()[i * c + i]).sum();
        let rg = self.rg(&[a.0]);
        Ok(self.push(Tensor::scalar(s), Op::Trace(a.0), rg))
    }

    // ── elementwise ──────────────────────────────────────────────────

    fn same_shape(&self, a: usize, b: usize, what: &str) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.val(a).shape(),
                self.val(b).shape()
            )));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, y) = (self.val(a.0), self.val(b.0));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        let out = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(&[a.0, b.0]);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a.0, b.0, "add")?;
        Ok(self.zip(a, b, Op::Add(a.0, b.0), |p, q| p + q))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a.0, b.0, "sub")?;
        Ok(self.zip(a, b, Op::Sub(a.0, b.0), |p, q| p - q))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a.0, b.0, "mul")?;
        Ok(self.zip(a, b, Op::Mul(a.0, b.0), |p, q| p * q))
    }

    /// Adds a length-`n` row to every row of an `m × n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.val(a.0).dims2()?;
        if self.val(row.0).numel() != n {
            return Err(Error::shape(format!(
                "add_row: row of {} for width {n}",
                self.val(row.0).numel()
            )));
        }
        let r = self.val(row.0).data();
        let x = self.val(a.0);
        let mut data = x.data().to_vec();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += r[j];
            }
        }
        let out = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a.0, row.0]);
        Ok(self.push(out, Op::AddRow(a.0, row.0), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.val(a.0).map(f);
        let rg = self.rg(&[a.0]);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a.0, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a.0), |v| v + c)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a.0), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a.0), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a.0), f64::exp)
    }

    /// `ln(max(x, floor))`; the clamped region has zero gradient.
    pub fn log_clamped(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::Log { x: a.0, floor }, |v| v.max(floor).ln())
    }

    /// Elementwise map with a caller-supplied derivative `df(input, output)`.
    pub fn map(&mut self, a: Var, f: fn(f64) -> f64, df: ElementwiseDerivative) -> Var {
        self.unary(a, Op::Elementwise { x: a.0, df }, f)
    }

    /// Row-wise `softmax(temp · x)` computed with max subtraction.
    pub fn softmax_temperature(&mut self, a: Var, temp: f64) -> Result<Var> {
        let out = softmax_rows(self.val(a.0), temp)?;
        let rg = self.rg(&[a.0]);
        Ok(self.push(out, Op::Softmax { x: a.0, temp }, rg))
    }

    // ── convolution and pooling ──────────────────────────────────────

    /// Valid 1-D convolution of a `k × T` input with a `k × h` filter plus a
    /// per-position bias of length `T − h + 1`.
    pub fn conv1d_valid(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (k, t) = self.val(x.0).dims2()?;
        let (kw, h) = self.val(w.0).dims2()?;
        if kw != k {
            return Err(Error::shape(format!(
                "filter height {kw} differs from input height {k}"
            )));
        }
        if h == 0 || t < h {
            return Err(Error::shape(format!(
                "input length {t} shorter than window {h}"
            )));
        }
        let n = t - h + 1;
        if self.val(b.0).numel() != n {
            return Err(Error::shape(format!(
                "bias length {} but output length {n}",
                self.val(b.0).numel()
            )));
        }
        let (xd, wd, bd) = (self.val(x.0).data(), self.val(w.0).data(), self.val(b.0).data());
        let mut out = bd.to_vec();
        for (pos, o) in out.iter_mut().enumerate() {
            for i in 0..k {
                for j in 0..h {
                    *o += xd[i * t + pos + j] * wd[i * h + j];
                }
            }
        }
        let rg = self.rg(&[x.0, w.0, b.0]);
        Ok(self.push(
            Tensor::vector(out),
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            rg,
        ))
    }

    /// Maximum of a non-empty vector. Ties resolve to the lowest index.
    pub fn max_over_time(&mut self, x: Var) -> Result<(Var, usize)> {
        let d = self.val(x.0).data();
        if d.is_empty() {
            return Err(Error::shape("max_over_time of an empty vector"));
        }
        let argmax = first_argmax(d);
        let out = Tensor::scalar(d[argmax]);
        let rg = self.rg(&[x.0]);
        Ok((self.push(out, Op::MaxOverTime { x: x.0, argmax }, rg), argmax))
    }

    /// Column-wise max over consecutive groups of `seg` rows: `[B·seg, p] → [B, p]`.
    pub fn segment_max(&mut self, x: Var, seg: usize) -> Result<Var> {
        let (rows, p) = self.val(x.0).dims2()?;
        if seg == 0 || rows % seg != 0 {
            return Err(Error::shape(format!(
                "segment length {seg} does not divide {rows} rows"
            )));
        }
        let batch = rows / seg;
        let d = self.val(x.0).data();
        let mut out = vec![0.0; batch * p];
        let mut argmax = vec![0usize; batch * p];
        for b in 0..batch {
            for c in 0..p {
                let mut best = b * seg;
                for r in b * seg + 1..(b + 1) * seg {
                    if d[r * p + c] > d[best * p + c] {
                        best = r;
                    }
                }
                out[b * p + c] = d[best * p + c];
                argmax[b * p + c] = best;
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![batch, p], out)?,
            Op::SegmentMax { x: x.0, argmax },
            rg,
        ))
    }

    /// Unfolds `[B, T, k]` into sliding windows `[B·(T−h+1), h·k]`; row
    /// `(b, t)` is `x[b, t..t+h, :]` flattened.
    pub fn im2col(&mut self, x: Var, h: usize) -> Result<Var> {
        let shape = self.val(x.0).shape().to_vec();
        let [batch, t, k] = shape[..] else {
            return Err(Error::shape(format!("im2col expects [B,T,k], found {shape:?}")));
        };
        if h == 0 || t < h {
            return Err(Error::shape(format!(
                "sequence length {t} shorter than window {h}"
            )));
        }
        let n = t - h + 1;
        let d = self.val(x.0).data();
        let mut out = Vec::with_capacity(batch * n * h * k);
        for b in 0..batch {
            for pos in 0..n {
                let start = (b * t + pos) * k;
                out.extend_from_slice(&d[start..start + h * k]);
            }
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![batch * n, h * k], out)?,
            Op::Im2Col { x: x.0, h },
            rg,
        ))
    }

    // ── indexing and layout ──────────────────────────────────────────

    /// Selects rows of a `V × k` table: `[ids.len(), k]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, k) = self.val(table.0).dims2()?;
        let t = self.val(table.0).data();
        let mut out = Vec::with_capacity(ids.len() * k);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    index: id,
                    extent: v,
                });
            }
            out.extend_from_slice(&t[id * k..(id + 1) * k]);
        }
        let rg = self.rg(&[table.0]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), k], out)?,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = match parts.first() {
            Some(p) => self.val(p.0).dims2()?.0,
            None => return Err(Error::shape("concat of zero tensors")),
        };
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = self.val(p.0).dims2()?;
            if r != m {
                return Err(Error::shape("concat_cols row mismatch"));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.val(p.0).data()[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(ids), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.val(x.0).dims2()?;
        if start + len > n {
            return Err(Error::shape(format!(
                "column slice {start}..{} of width {n}",
                start + len
            )));
        }
        let d = self.val(x.0).data();
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&d[i * n + start..i * n + start + len]);
        }
        let rg = self.rg(&[x.0]);
        Ok(self.push(
            Tensor::new(vec![m, len], out)?,
            Op::SliceCols { x: x.0, start },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.val(p.0)).collect();
        let out = Tensor::concat_rows(&tensors)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(out, Op::ConcatRows(ids), rg))
    }

    /// Stacks `T` step matrices of shape `[B, k]` into `[B, T, k]`.
    pub fn stack_steps(&mut self, steps: &[Var]) -> Result<Var> {
        let (b, k) = match steps.first() {
            Some(s) => self.val(s.0).dims2()?,
            None => return Err(Error::shape("stack of zero steps")),
        };
        let t = steps.len();
        let mut out = vec![0.0; b * t * k];
        for (ti, s) in steps.iter().enumerate() {
            let v = self.val(s.0);
            if v.dims2()? != (b, k) {
                return Err(Error::shape("stack_steps shape mismatch"));
            }
            for bi in 0..b {
                out[(bi * t + ti) * k..(bi * t + ti + 1) * k]
                    .copy_from_slice(&v.data()[bi * k..(bi + 1) * k]);
            }
        }
        let ids: Vec<usize> = steps.iter().map(|s| s.0).collect();
        let rg = self.rg(&ids);
        Ok(self.push(Tensor::new(vec![b, t, k], out)?, Op::StackSteps(ids), rg))
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.val(x.0).data().iter().sum();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::SumAll(x.0), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.val(x.0).data();
        let s = d.iter().sum::<f64>() / d.len().max(1) as f64;
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(s), Op::MeanAll(x.0), rg)
    }

    /// Column means of an `m × n` matrix as a `1 × n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let mean = self.val(x.0).mean_rows()?;
        let n = mean.len();
        let rg = self.rg(&[x.0]);
        Ok(self.push(Tensor::new(vec![1, n], mean)?, Op::MeanRows(x.0), rg))
    }

    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.val(x.0).l2_norm();
        let rg = self.rg(&[x.0]);
        self.push(Tensor::scalar(n), Op::L2Norm(x.0), rg)
    }

    /// Squared Euclidean distances between rows: `[n, d] × [m, d] → [n, m]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = pairwise_sq_dist(self.val(a.0), self.val(b.0))?;
        let rg = self.rg(&[a.0, b.0]);
        Ok(self.push(out, Op::PairwiseSqDist(a.0, b.0), rg))
    }

    /// Mean cross-entropy of row-wise softmax over `logits` against targets;
    /// `None` rows are masked out. Returns zero when every row is masked.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (m, v) = self.val(logits.0).dims2()?;
        if targets.len() != m {
            return Err(Error::shape(format!(
                "{} targets for {m} rows",
                targets.len()
            )));
        }
        let probs = softmax_rows(self.val(logits.0), 1.0)?;
        let p = probs.data();
        let l = self.val(logits.0).data();
        let mut total = 0.0;
        let mut count = 0;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                if t >= v {
                    return Err(Error::Index {
                        index: t,
                        extent: v,
                    });
                }
                let row = &l[i * v..(i + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                total += lse - row[t];
                count += 1;
            }
        }
        let loss = if count > 0 { total / count as f64 } else { 0.0 };
        let rg = self.rg(&[logits.0]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs: p.to_vec(),
                count,
            },
            rg,
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Accumulates `d out / d node` for every node that requires a gradient.
    /// `out` must hold a single element.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.val(out.0).numel() != 1 {
            return Err(Error::shape("backward from a non-scalar output"));
        }
        let n = self.nodes.len();
        self.grads = vec![None; n];
        if !self.nodes[out.0].requires_grad {
            return Ok(());
        }
        self.grads[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g)?;
        }
        Ok(())
    }

    /// Gradient of the last `backward` output with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::new(self.val(v.0).shape().to_vec(), g.clone()).expect("grad shape"))
    }

    /// Gradients of every bound, trainable parameter, zero-filled where the
    /// output did not depend on it.
    pub fn param_grads(&self) -> BTreeMap<String, Tensor> {
        self.bindings
            .iter()
            .filter(|(_, v)| self.nodes[v.0].requires_grad)
            .map(|(name, v)| {
                let g = self
                    .grad(*v)
                    .unwrap_or_else(|| Tensor::zeros(self.val(v.0).shape()));
                (name.clone(), g)
            })
            .collect()
    }

    fn acc(&mut self, target: usize, contrib: impl FnOnce(&mut [f64])) {
        if !self.nodes[target].requires_grad {
            return;
        }
        let len = self.nodes[target].value.numel();
        let slot = self.grads[target].get_or_insert_with(|| vec![0.0; len]);
        contrib(slot);
    }

    fn acc_scaled(&mut self, target: usize, g: &[f64], c: f64) {
        self.acc(target, |s| {
            s.iter_mut().zip(g).for_each(|(s, g)| *s += c * g);
        });
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) -> Result<()> {
        // Operands are read through `nodes` while gradients accumulate in `grads`.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        let result = self.backprop_op(i, &op, g);
        self.nodes[i].op = op;
        result
    }

    fn backprop_op(&mut self, i: usize, op: &Op, g: &[f64]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.val(a).dims2()?;
                let (_, n) = self.val(b).dims2()?;
                if self.nodes[a].requires_grad {
                    let bv = self.nodes[b].value.data().to_vec();
                    self.acc(a, |s| gemm(m, n, k, g, false, &bv, true, s, true));
                }
                if self.nodes[b].requires_grad {
                    let av = self.nodes[a].value.data().to_vec();
                    self.acc(b, |s| gemm(k, m, n, &av, true, g, false, s, true));
                }
            }
            Op::Add(a, b) => {
                self.acc_scaled(a, g, 1.0);
                self.acc_scaled(b, g, 1.0);
            }
            Op::Sub(a, b) => {
                self.acc_scaled(a, g, 1.0);
                self.acc_scaled(b, g, -1.0);
            }
            Op::Mul(a, b) => {
                let av = self.val(a).data().to_vec();
                let bv = self.val(b).data().to_vec();
                self.acc(a, |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(&bv) {
                        *s += g * y;
                    }
                });
                self.acc(b, |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(&av) {
                        *s += g * x;
                    }
                });
            }
            Op::AddRow(a, row) => {
                self.acc_scaled(a, g, 1.0);
                let n = self.val(row).numel();
                self.acc(row, |s| {
                    for (idx, g) in g.iter().enumerate() {
                        s[idx % n] += g;
                    }
                });
            }
            Op::Scale(a, c) => self.acc_scaled(a, g, c),
            Op::AddScalar(a) => self.acc_scaled(a, g, 1.0),
            Op::Tanh(a) => {
                let y = self.val(i).data().to_vec();
                self.acc(a, |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(&y) {
                        *s += g * (1.0 - y * y);
                    }
                });
            }
            Op::Sigmoid(a) => {
                let y = self.val(i).data().to_vec();
                self.acc(a, |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(&y) {
                        *s += g * y * (1.0 - y);
                    }
                });
            }
            Op::Exp(a) => {
                let y = self.val(i).data().to_vec();
                self.acc(a, |s| {
                    for ((s, g), y) in s.iter_mut().zip(g).zip(&y) {
                        *s += g * y;
                    }
                });
            }
            Op::Log { x, floor } => {
                let xv = self.val(x).data().to_vec();
                self.acc(x, |s| {
                    for ((s, g), x) in s.iter_mut().zip(g).zip(&xv) {
                        if *x > floor {
                            *s += g / x;
                        }
                    }
                });
            }
            Op::Elementwise { x, df } => {
                let xv = self.val(x).data().to_vec();
                let y = self.val(i).data().to_vec();
                self.acc(x, |s| {
                    for (j, s) in s.iter_mut().enumerate() {
                        *s += g[j] * df(xv[j], y[j]);
                    }
                });
            }
            Op::Softmax { x, temp } => {
                let (m, n) = self.val(i).dims2()?;
                let y = self.val(i).data().to_vec();
                self.acc(x, |s| {
                    for r in 0..m {
                        let row = r * n..(r + 1) * n;
                        let dot: f64 = g[row.clone()].iter().zip(&y[row.clone()]).map(|(g, y)| g * y).sum();
                        for j in row {
                            s[j] += temp * y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::Conv1d { x, w, b } => {
                let (k, t) = self.val(x).dims2()?;
                let (_, h) = self.val(w).dims2()?;
                let xv = self.val(x).data().to_vec();
                let wv = self.val(w).data().to_vec();
                self.acc(x, |s| {
                    for (pos, gp) in g.iter().enumerate() {
                        for r in 0..k {
                            for j in 0..h {
                                s[r * t + pos + j] += gp * wv[r * h + j];
                            }
                        }
                    }
                });
                self.acc(w, |s| {
                    for (pos, gp) in g.iter().enumerate() {
                        for r in 0..k {
                            for j in 0..h {
                                s[r * h + j] += gp * xv[r * t + pos + j];
                            }
                        }
                    }
                });
                self.acc_scaled(b, g, 1.0);
            }
            Op::MaxOverTime { x, argmax } => {
                self.acc(x, |s| s[argmax] += g[0]);
            }
            Op::SegmentMax { x, ref argmax } => {
                let (_, p) = self.val(i).dims2()?;
                self.acc(x, |s| {
                    for (idx, &row) in argmax.iter().enumerate() {
                        s[row * p + idx % p] += g[idx];
                    }
                });
            }
            Op::Im2Col { x, h } => {
                let shape = self.val(x).shape().to_vec();
                let (batch, t, k) = (shape[0], shape[1], shape[2]);
                let n = t - h + 1;
                self.acc(x, |s| {
                    for b in 0..batch {
                        for pos in 0..n {
                            let row = (b * n + pos) * h * k;
                            let start = (b * t + pos) * k;
                            for c in 0..h * k {
                                s[start + c] += g[row + c];
                            }
                        }
                    }
                });
            }
            Op::Gather { table, ref ids } => {
                let (_, k) = self.val(table).dims2()?;
                self.acc(table, |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        for c in 0..k {
                            s[id * k + c] += g[r * k + c];
                        }
                    }
                });
            }
            Op::ConcatCols(ref parts) => {
                let (m, total) = self.val(i).dims2()?;
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.val(p).dims2()?;
                    self.acc(p, |s| {
                        for r in 0..m {
                            for c in 0..w {
                                s[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, len) = self.val(i).dims2()?;
                let (_, n) = self.val(x).dims2()?;
                self.acc(x, |s| {
                    for r in 0..m {
                        for c in 0..len {
                            s[r * n + start + c] += g[r * len + c];
                        }
                    }
                });
            }
            Op::ConcatRows(ref parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.val(p).numel();
                    self.acc_scaled(p, &g[offset..offset + len], 1.0);
                    offset += len;
                }
            }
            Op::StackSteps(ref steps) => {
                let shape = self.val(i).shape().to_vec();
                let (b, t, k) = (shape[0], shape[1], shape[2]);
                for (ti, &st) in steps.iter().enumerate() {
                    self.acc(st, |s| {
                        for bi in 0..b {
                            for c in 0..k {
                                s[bi * k + c] += g[(bi * t + ti) * k + c];
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.val(a).dims2()?;
                self.acc(a, |s| {
                    for x in 0..r {
                        for y in 0..c {
                            s[x * c + y] += g[y * r + x];
                        }
                    }
                });
            }
            Op::Reshape(a) => self.acc_scaled(a, g, 1.0),
            Op::SumAll(a) => {
                let g0 = g[0];
                self.acc(a, |s| s.iter_mut().for_each(|s| *s += g0));
            }
            Op::MeanAll(a) => {
                let g0 = g[0] / self.val(a).numel().max(1) as f64;
                self.acc(a, |s| s.iter_mut().for_each(|s| *s += g0));
            }
            Op::MeanRows(a) => {
                let (m, n) = self.val(a).dims2()?;
                let inv = 1.0 / m as f64;
                self.acc(a, |s| {
                    for (idx, s) in s.iter_mut().enumerate() {
                        *s += g[idx % n] * inv;
                    }
                });
            }
            Op::Inverse(a) => {
                // d(A⁻¹) = −A⁻¹ dA A⁻¹  ⇒  Ḡ_A = −A⁻ᵀ G A⁻ᵀ
                let (n, _) = self.val(i).dims2()?;
                let inv = self.val(i).data().to_vec();
                let mut tmp = vec![0.0; n * n];
                gemm(n, n, n, &inv, true, g, false, &mut tmp, false);
                let mut out = vec![0.0; n * n];
                gemm(n, n, n, &tmp, false, &inv, true, &mut out, false);
                self.acc_scaled(a, &out, -1.0);
            }
            Op::Trace(a) => {
                let (n, _) = self.val(a).dims2()?;
                let g0 = g[0];
                self.acc(a, |s| {
                    for d in 0..n {
                        s[d * n + d] += g0;
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                ref targets,
                ref probs,
                count,
            } => {
                if count == 0 {
                    return Ok(());
                }
                let (_, v) = self.val(logits).dims2()?;
                let scale = g[0] / count as f64;
                self.acc(logits, |s| {
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for c in 0..v {
                                s[r * v + c] += scale * probs[r * v + c];
                            }
                            s[r * v + t] -= scale;
                        }
                    }
                });
            }
            Op::PairwiseSqDist(a, b) => {
                let (n, d) = self.val(a).dims2()?;
                let (m, _) = self.val(b).dims2()?;
                let av = self.val(a).data().to_vec();
                let bv = self.val(b).data().to_vec();
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; m * d];
                for r in 0..n {
                    for c in 0..m {
                        let w = 2.0 * g[r * m + c];
                        if w == 0.0 {
                            continue;
                        }
                        for e in 0..d {
                            let diff = av[r * d + e] - bv[c * d + e];
                            ga[r * d + e] += w * diff;
                            gb[c * d + e] -= w * diff;
                        }
                    }
                }
                self.acc_scaled(a, &ga, 1.0);
                self.acc_scaled(b, &gb, 1.0);
            }
            Op::L2Norm(a) => {
                let norm = self.val(i).item();
                if norm > 0.0 {
                    let xv = self.val(a).data().to_vec();
                    let c = g[0] / norm;
                    self.acc_scaled(a, &xv, c);
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Index of the first maximal element.
pub fn first_argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Row-wise `softmax(temp · x)` over the last axis.
pub fn softmax_rows(x: &Tensor, temp: f64) -> Result<Tensor> {
    if !(temp > 0.0) {
        return Err(Error::Domain(format!(
            "softmax temperature must be positive, got {temp}"
        )));
    }
    let (m, n) = x.dims2()?;
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let row = &x.data()[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) * temp;
        let o = &mut out[r * n..(r + 1) * n];
        let mut z = 0.0;
        for (o, v) in o.iter_mut().zip(row) {
            *o = (temp * v - max).exp();
            z += *o;
        }
        o.iter_mut().for_each(|v| *v /= z);
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Squared Euclidean distances between the rows of `a` and the rows of `b`.
pub fn pairwise_sq_dist(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, d) = a.dims2()?;
    let (m, d2) = b.dims2()?;
    if d != d2 {
        return Err(Error::shape(format!("feature dimension {d} vs {d2}")));
    }
    let mut out = vec![0.0; n * m];
    for r in 0..n {
        let x = a.row(r);
        for c in 0..m {
            let y = b.row(c);
            out[r * m + c] = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        }
    }
    Tensor::new(vec![n, m], out)
}

/// Gauss-Jordan inverse with partial pivoting.
pub fn invert(a: &Tensor) -> Result<Tensor> {
    let (n, c) = a.dims2()?;
    if n != c {
        return Err(Error::shape(format!("inverse of non-square {n}x{c}")));
    }
    let mut m = a.data().to_vec();
    let mut inv = Tensor::identity(n).into_data();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&x, &y| m[x * n + col].abs().total_cmp(&m[y * n + col].abs()))
            .unwrap_or(col);
        let pv = m[pivot * n + col];
        if !pv.is_finite() || pv.abs() < 1e-300 {
            return Err(Error::Numerical(format!(
                "singular matrix: pivot {pv:e} in column {col}"
            )));
        }
        if pivot != col {
            for j in 0..n {
                m.swap(pivot * n + j, col * n + j);
                inv.swap(pivot * n + j, col * n + j);
            }
        }
        let scale = 1.0 / pv;
        for j in 0..n {
            m[col * n + j] *= scale;
            inv[col * n + j] *= scale;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[r * n + col];
            if f == 0.0 {
                continue;
            }
            for j in 0..n {
                m[r * n + j] -= f * m[col * n + j];
                inv[r * n + j] -= f * inv[col * n + j];
            }
        }
    }
    Tensor::new(vec![n, n], inv)
}

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let (n, c) = a.dims2()?;
    if n != c {
        return Err(Error::shape(format!("Cholesky of non-square {n}x{c}")));
    }
    let a = a.data();
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let diag = a[j * n + j] - (0..j).map(|k| l[j * n + k] * l[j * n + k]).sum::<f64>();
        if !(diag > 0.0) {
            return Err(Error::Numerical(format!(
                "not positive definite: pivot {j} is {diag:e} (diagonal entry {:e})",
                a[j * n + j]
            )));
        }
        let ljj = diag.sqrt();
        l[j * n + j] = ljj;
        for i in j + 1..n {
            let s = a[i * n + j] - (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum::<f64>();
            l[i * n + j] = s / ljj;
        }
    }
    Tensor::new(vec![n, n], l)
}

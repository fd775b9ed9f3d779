//! Tape-based reverse-mode automatic differentiation over 2-D tensors.
//!
//! Every primitive evaluates eagerly and appends a node to the [`Tape`].
//! Nodes whose inputs never touch a `requires_grad` leaf are marked
//! constant and are skipped entirely during [`Tape::backward`], so frozen
//! sub-networks cost nothing beyond their forward pass.
//!
//! Rank-1 tensors are treated as a single row wherever a matrix is expected.

use crate::error::{NumError, Result};
use crate::tensor::{dims2, Tensor};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    Softmax { x: usize },
    LayerNorm { x: usize, rstd: Vec<f64> },
    Gelu(usize),
    Gather { table: usize, ids: Vec<usize> },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows { x: usize, start: usize },
    SliceCols { x: usize, start: usize },
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    MeanRows(usize),
    ScatterAddRows {
        base: usize,
        rows: Vec<usize>,
        update: usize,
    },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Primitive kinds, for callers that dispatch on a name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    MatMul,
    Add,
    AddRow,
    Mul,
    Softmax,
    LayerNorm,
    Gelu,
    Gather,
    ConcatRows,
    SliceRows,
    Transpose,
    Mean,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: std::collections::HashMap<(usize, usize), Var>,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], i: usize) -> Option<&'a mut Vec<f64>> {
    if !nodes[i].requires_grad {
        return None;
    }
    Some(grads[i].get_or_insert_with(|| vec![0.0; nodes[i].value.len()]))
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> NumError {
    NumError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// `c (m×n) = a (m×k) · b (k×n) + beta·c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: lengths checked above; strides describe in-bounds views of a and b.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: usize) -> bool {
        self.nodes[v].requires_grad
    }

    fn d2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        dims2(op, &self.nodes[v.0].shape)
    }

    /// Records a tensor; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Records a long-lived tensor once per tape; later calls with the same
    /// tensor return the same leaf. Identity is the tensor's storage address,
    /// so the tensor must not be mutated while the tape is in use.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let key = (t.data().as_ptr() as usize, t.numel());
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(t);
        self.params.insert(key, v);
        v
    }

    /// The leaf previously created for `t` by [`Tape::param`], if any.
    pub fn param_var(&self, t: &Tensor) -> Option<Var> {
        self.params
            .get(&(t.data().as_ptr() as usize, t.numel()))
            .copied()
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Generic dispatch over the primitive set for unary/binary kinds.
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let need = |n: usize| -> Result<()> {
            if inputs.len() == n {
                Ok(())
            } else {
                Err(NumError::InvalidShape {
                    op: "apply",
                    shape: vec![inputs.len()],
                    reason: format!("{kind:?} takes {n} inputs"),
                })
            }
        };
        match kind {
            OpKind::MatMul => need(2).and_then(|_| self.matmul(inputs[0], inputs[1])),
            OpKind::Add => need(2).and_then(|_| self.add(inputs[0], inputs[1])),
            OpKind::AddRow => need(2).and_then(|_| self.add_row(inputs[0], inputs[1])),
            OpKind::Mul => need(2).and_then(|_| self.mul(inputs[0], inputs[1])),
            OpKind::Softmax => need(1).and_then(|_| self.softmax(inputs[0])),
            OpKind::LayerNorm => need(1).and_then(|_| self.layer_norm(inputs[0])),
            OpKind::Gelu => need(1).and_then(|_| self.gelu(inputs[0])),
            OpKind::ConcatRows => self.concat_rows(inputs),
            OpKind::Transpose => need(1).and_then(|_| self.transpose(inputs[0])),
            OpKind::Mean => need(1).and_then(|_| self.mean(inputs[0])),
            OpKind::Gather | OpKind::SliceRows => Err(NumError::InvalidShape {
                op: "apply",
                shape: vec![],
                reason: format!("{kind:?} needs index arguments; call it directly"),
            }),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.d2("matmul", a)?;
        let (k2, n) = self.d2("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a),
            (k as isize, 1),
            self.value(b),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(vec![m, n], out, Op::MatMul(a.0, b.0), rg))
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let da = self.d2(name, a)?;
        let db = self.d2(name, b)?;
        if da != db {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.elementwise("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(shape, out, Op::Add(a.0, b.0), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.elementwise("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(shape, out, Op::Sub(a.0, b.0), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.elementwise("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a.0) || self.rg(b.0);
        Ok(self.push(shape, out, Op::Mul(a.0, b.0), rg))
    }

    fn row_broadcast(
        &mut self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Vec<f64>> {
        let (_, c) = self.d2(name, a)?;
        if self.value(row).len() != c {
            return Err(mismatch(name, self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        Ok(self
            .value(a)
            .chunks_exact(c)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&x, &y)| f(x, y)))
            .collect())
    }

    /// `a[i, j] + row[j]` for every row `i`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        let rg = self.rg(a.0) || self.rg(row.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::AddRow(a.0, row.0), rg))
    }

    /// `a[i, j] * row[j]` for every row `i`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let out = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        let rg = self.rg(a.0) || self.rg(row.0);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::MulRow(a.0, row.0), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(a.0);
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale(a.0, c), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row softmax where row `i` only sees columns `j <= i + (cols - rows)`.
    /// Masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        let (r, c) = self.d2("softmax", x)?;
        if causal && r > c {
            return Err(NumError::InvalidShape {
                op: "causal_softmax",
                shape: self.shape(x).to_vec(),
                reason: "more query rows than key columns".into(),
            });
        }
        let offset = c - r.min(c);
        let mut out = vec![0.0; r * c];
        let xv = self.value(x);
        for i in 0..r {
            let visible = if causal { i + offset + 1 } else { c };
            let row = &xv[i * c..i * c + visible];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..i * c + visible];
            let mut sum = 0.0;
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - max).exp();
                sum += *d;
            }
            for d in dst.iter_mut() {
                *d /= sum;
            }
        }
        let rg = self.rg(x.0);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Softmax { x: x.0 }, rg))
    }

    /// Per-row normalisation to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.d2("layer_norm", x)?;
        let xv = self.value(x);
        let mut out = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(r);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let s = 1.0 / (var + LN_EPS).sqrt();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let rg = self.rg(x.0);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::LayerNorm { x: x.0, rstd }, rg))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        let rg = self.rg(x.0);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Gelu(x.0), rg))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`. Also serves as embedding lookup.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.d2("gather_rows", table)?;
        if ids.is_empty() {
            return Err(NumError::InvalidShape {
                op: "gather_rows",
                shape: vec![0],
                reason: "no indices".into(),
            });
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(NumError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    len: r,
                });
            }
            out.extend_from_slice(&tv[id * c..(id + 1) * c]);
        }
        let rg = self.rg(table.0);
        Ok(self.push(
            vec![ids.len(), c],
            out,
            Op::Gather {
                table: table.0,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumError::InvalidShape {
            op: "concat_rows",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let (_, c) = self.d2("concat_rows", first)?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.d2("concat_rows", p)?;
            if pc != c {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(
            vec![rows, c],
            out,
            Op::ConcatRows(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(NumError::InvalidShape {
            op: "concat_cols",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let (r, _) = self.d2("concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.d2("concat_cols", p)?;
            if pr != r {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let v = self.value(p);
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&v[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let rg = parts.iter().any(|p| self.rg(p.0));
        Ok(self.push(
            vec![r, total],
            out,
            Op::ConcatCols(parts.iter().map(|p| p.0).collect()),
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.d2("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(NumError::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                len: r,
            });
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(x.0);
        Ok(self.push(vec![len, c], out, Op::SliceRows { x: x.0, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.d2("slice_cols", x)?;
        if len == 0 || start + len > c {
            return Err(NumError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                len: c,
            });
        }
        let v = self.value(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&v[i * c + start..i * c + start + len]);
        }
        let rg = self.rg(x.0);
        Ok(self.push(vec![r, len], out, Op::SliceCols { x: x.0, start }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.d2("transpose", x)?;
        let v = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v[i * c + j];
            }
        }
        let rg = self.rg(x.0);
        Ok(self.push(vec![c, r], out, Op::Transpose(x.0), rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x.0);
        Ok(self.push(vec![1], vec![s], Op::Sum(x.0), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x.0);
        Ok(self.push(vec![1], vec![s], Op::Mean(x.0), rg))
    }

    /// Column means: `[r, c] -> [1, c]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.d2("mean_rows", x)?;
        let mut out = vec![0.0; c];
        for row in self.value(x).chunks_exact(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        let rg = self.rg(x.0);
        Ok(self.push(vec![1, c], out, Op::MeanRows(x.0), rg))
    }

    /// Copy of `base` with `update[i]` added to row `rows[i]`. Rows not listed
    /// are copied bit-for-bit.
    pub fn scatter_add_rows(&mut self, base: Var, rows: &[usize], update: Var) -> Result<Var> {
        let (r, c) = self.d2("scatter_add_rows", base)?;
        let (ur, uc) = self.d2("scatter_add_rows", update)?;
        if uc != c || ur != rows.len() {
            return Err(mismatch(
                "scatter_add_rows",
                self.shape(base),
                self.shape(update),
            ));
        }
        let mut seen = vec![false; r];
        for &row in rows {
            if row >= r {
                return Err(NumError::IndexOutOfRange {
                    op: "scatter_add_rows",
                    index: row,
                    len: r,
                });
            }
            if std::mem::replace(&mut seen[row], true) {
                return Err(NumError::InvalidShape {
                    op: "scatter_add_rows",
                    shape: vec![row],
                    reason: "duplicate target row".into(),
                });
            }
        }
        let mut out = self.value(base).to_vec();
        let uv = self.value(update);
        for (i, &row) in rows.iter().enumerate() {
            for (o, u) in out[row * c..(row + 1) * c]
                .iter_mut()
                .zip(&uv[i * c..(i + 1) * c])
            {
                *o += u;
            }
        }
        let rg = self.rg(base.0) || self.rg(update.0);
        let shape = self.shape(base).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::ScatterAddRows {
                base: base.0,
                rows: rows.to_vec(),
                update: update.0,
            },
            rg,
        ))
    }

    /// Mean next-token cross-entropy over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (n, v) = self.d2("cross_entropy", logits)?;
        if targets.len() != n || mask.len() != n {
            return Err(mismatch(
                "cross_entropy",
                self.shape(logits),
                &[targets.len(), mask.len()],
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(NumError::InvalidShape {
                op: "cross_entropy",
                shape: vec![n],
                reason: "empty loss mask".into(),
            });
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut loss = 0.0;
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(NumError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: targets[i],
                    len: v,
                });
            }
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let p = &mut probs[i * v..(i + 1) * v];
            let mut sum = 0.0;
            for (d, &x) in p.iter_mut().zip(row) {
                *d = (x - max).exp();
                sum += *d;
            }
            for d in p.iter_mut() {
                *d /= sum;
            }
            loss += sum.ln() + max - row[targets[i]];
        }
        let rg = self.rg(logits.0);
        Ok(self.push(
            vec![1],
            vec![loss / count as f64],
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients of every
    /// differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(NumError::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if ln.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let (_, cols) = dims2("backward", &node.shape).unwrap_or((1, node.value.len()));
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims2("matmul", &nodes[*a].shape).expect("validated");
                let n = cols;
                if let Some(ga) = acc(nodes, grads, *a) {
                    // dA += dC · Bᵀ
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        &nodes[*b].value,
                        (1, n as isize),
                        1.0,
                        ga,
                    );
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    // dB += Aᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        &nodes[*a].value,
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        1.0,
                        gb,
                    );
                }
            }
            Op::Add(a, b) => {
                for (idx, sign) in [(*a, 1.0), (*b, 1.0)] {
                    if let Some(ga) = acc(nodes, grads, idx) {
                        ga.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (idx, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if let Some(ga) = acc(nodes, grads, idx) {
                        ga.iter_mut().zip(g).for_each(|(d, s)| *d += sign * s);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(&nodes[*b].value) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = acc(nodes, grads, *b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(&nodes[*a].value) {
                        *d += s * x;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gr) = acc(nodes, grads, *row) {
                    for chunk in g.chunks_exact(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::MulRow(a, row) => {
                let rv = &nodes[*row].value;
                if let Some(ga) = acc(nodes, grads, *a) {
                    for (dchunk, gchunk) in ga.chunks_exact_mut(cols).zip(g.chunks_exact(cols)) {
                        for ((d, s), r) in dchunk.iter_mut().zip(gchunk).zip(rv) {
                            *d += s * r;
                        }
                    }
                }
                if let Some(gr) = acc(nodes, grads, *row) {
                    let av = &nodes[*a].value;
                    for (gchunk, achunk) in g.chunks_exact(cols).zip(av.chunks_exact(cols)) {
                        for ((d, s), x) in gr.iter_mut().zip(gchunk).zip(achunk) {
                            *d += s * x;
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = acc(nodes, grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::Softmax { x, .. } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    let y = &node.value;
                    for ((dchunk, gchunk), ychunk) in gx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                    {
                        let dot: f64 = gchunk.iter().zip(ychunk).map(|(a, b)| a * b).sum();
                        for ((d, s), yv) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                            *d += yv * (s - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, rstd } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    let y = &node.value;
                    let c = cols as f64;
                    for (((dchunk, gchunk), ychunk), s) in gx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(cols))
                        .zip(y.chunks_exact(cols))
                        .zip(rstd)
                    {
                        let mg = gchunk.iter().sum::<f64>() / c;
                        let mgy = gchunk.iter().zip(ychunk).map(|(a, b)| a * b).sum::<f64>() / c;
                        for ((d, gv), yv) in dchunk.iter_mut().zip(gchunk).zip(ychunk) {
                            *d += s * (gv - mg - yv * mgy);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for ((d, s), &v) in gx.iter_mut().zip(g).zip(&nodes[*x].value) {
                        let t = (GELU_C * (v + 0.044715 * v * v * v)).tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        *d += s * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                }
            }
            Op::Gather { table, ids } => {
                if let Some(gt) = acc(nodes, grads, *table) {
                    for (i, &id) in ids.iter().enumerate() {
                        let src = &g[i * cols..(i + 1) * cols];
                        gt[id * cols..(id + 1) * cols]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if let Some(gp) = acc(nodes, grads, p) {
                        gp.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(d, s)| *d += s);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.len() / cols;
                let mut off = 0;
                for &p in parts {
                    let w = nodes[p].value.len() / rows;
                    if let Some(gp) = acc(nodes, grads, p) {
                        for i in 0..rows {
                            gp[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&g[i * cols + off..i * cols + off + w])
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    let begin = start * cols;
                    gx[begin..begin + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, s)| *d += s);
                }
            }
            Op::SliceCols { x, start } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    let (_, xc) = dims2("slice_cols", &nodes[*x].shape).expect("validated");
                    for (i, chunk) in g.chunks_exact(cols).enumerate() {
                        gx[i * xc + start..i * xc + start + cols]
                            .iter_mut()
                            .zip(chunk)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Transpose(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    // node is [c, r]; x is [r, c]
                    let r = cols;
                    let c = node.value.len() / r;
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
            Op::MeanRows(x) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    let r = (gx.len() / cols) as f64;
                    for chunk in gx.chunks_exact_mut(cols) {
                        chunk.iter_mut().zip(g).for_each(|(d, s)| *d += s / r);
                    }
                }
            }
            Op::ScatterAddRows { base, rows, update } => {
                if let Some(gb) = acc(nodes, grads, *base) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
                if let Some(gu) = acc(nodes, grads, *update) {
                    for (i, &row) in rows.iter().enumerate() {
                        gu[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[row * cols..(row + 1) * cols])
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if let Some(gl) = acc(nodes, grads, *logits) {
                    let v = probs.len() / targets.len();
                    let s = g[0] / *count as f64;
                    for (i, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut gl[i * v..(i + 1) * v];
                        for (d, p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                            *d += s * p;
                        }
                        row[t] -= s;
                    }
                }
            }
        }
    }
}

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive application in evaluation order, so the
//! node list is already topologically sorted. [`Graph::backward`] walks it once
//! in reverse and accumulates gradients additively into each parent.

use crate::error::{NumericsError, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Tensor};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    MulConst(Var, Tensor),
    Transpose(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, rstd: Vec<f64> },
    Tanh(Var),
    Gelu(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Gather { table: Var, ids: Vec<usize> },
    MaskedFill { x: Var, mask: Vec<bool> },
    MaxAxis { x: Var, axis: usize, arg: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Slice { x: Var, r0: usize, c0: usize },
    Concat { parts: Vec<Var>, axis: usize },
    NormalizeRows { x: Var, norms: Vec<f64> },
    Pick { x: Var, cols: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward evaluation.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    check_finite: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the node does not depend on any trainable leaf or the
    /// loss does not depend on it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Every node that received a gradient.
    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (Var(i), g)))
    }
}

/// Sum in ascending order, so the result does not depend on input order.
fn ordered_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_unstable_by(f64::total_cmp);
    v.iter().sum()
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
    /// Finiteness checking is on in debug builds.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
        }
    }

    pub fn with_finiteness_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(NumericsError::NonFinite { op: name });
        }
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push_raw(value, op, rg))
    }

    fn val2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul(self.value(a), self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "add")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "sub")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.same_shape(y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(x.shape().to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    /// `x (m x n) + b (1 x n)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.val2(x, "add_row")?;
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.shape() != [1, n] {
            return Err(mismatch("add_row", xv, bv));
        }
        let mut data = xv.data().to_vec();
        for i in 0..m {
            for (o, &bb) in data[i * n..(i + 1) * n].iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push("add_row", out, Op::AddRow(x, b), &[x, b])
    }

    /// `x (m x n) * g (1 x n)` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, g: Var) -> Result<Var> {
        let (m, n) = self.val2(x, "mul_row")?;
        let (xv, gv) = (self.value(x), self.value(g));
        if gv.shape() != [1, n] {
            return Err(mismatch("mul_row", xv, gv));
        }
        let mut data = xv.data().to_vec();
        for i in 0..m {
            for (o, &gg) in data[i * n..(i + 1) * n].iter_mut().zip(gv.data()) {
                *o *= gg;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push("mul_row", out, Op::MulRow(x, g), &[x, g])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    /// `x * s` where `s` is a `1 x 1` node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        let out = self.value(x).map(|v| v * sv);
        self.push("mul_scalar", out, Op::MulScalar(x, s), &[x, s])
    }

    /// Elementwise product with a constant tensor (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let xv = self.value(x);
        xv.same_shape(&c, "mul_const")?;
        let data = xv.data().iter().zip(c.data()).map(|(p, q)| p * q).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        self.push("mul_const", out, Op::MulConst(x, c), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        self.push("transpose", out, Op::Transpose(x), &[x])
    }

    /// Softmax over each row, max-shifted.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.val2(x, "softmax")?;
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
            }
            let z = ordered_sum(row.iter().copied());
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push("softmax", out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over each row via log-sum-exp.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.val2(x, "log_softmax")?;
        let mut data = self.value(x).data().to_vec();
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + ordered_sum(row.iter().map(|v| (v - mx).exp())).ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push("log_softmax", out, Op::LogSoftmax(x), &[x])
    }

    /// Per-row standardization (population variance), no affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.val2(x, "layer_norm")?;
        let mut data = self.value(x).data().to_vec();
        let mut rstd = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push("layer_norm", out, Op::LayerNorm { x, rstd }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(x), &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()));
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::exp);
        self.push("exp", out, Op::Exp(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::abs);
        self.push("abs", out, Op::Abs(x), &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v * v);
        self.push("square", out, Op::Square(x), &[x])
    }

    /// Rows of `table` selected by `ids`, giving `ids.len() x cols`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.val2(table, "gather_rows")?;
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return Err(NumericsError::IndexOutOfRange {
                    op: "gather_rows",
                    index: id,
                    extent: r,
                });
            }
            data.extend_from_slice(t.row_slice(id));
        }
        let out = Tensor::new(vec![ids.len(), c], data)?;
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather_rows", out, op, &[table])
    }

    /// Replace entries where `mask` is true with `fill`. `mask` is row-major
    /// over the full tensor.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], fill: f64) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "masked_fill",
                lhs: xv.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let data = xv
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { fill } else { v })
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let op = Op::MaskedFill { x, mask: mask.to_vec() };
        // -inf fills are intentional here; softmax downstream is checked.
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push_raw(out, op, rg))
    }

    /// Elementwise maximum reduction over `axis` (0 = down rows, 1 = across
    /// columns). Ties resolve to the first index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.val2(x, "max_axis")?;
        if m == 0 || n == 0 {
            return Err(NumericsError::Invalid("max_axis over an empty tensor".into()));
        }
        let xv = self.value(x);
        let (shape, vals, arg) = match axis {
            0 => {
                let mut vals = xv.row_slice(0).to_vec();
                let mut arg = vec![0; n];
                for i in 1..m {
                    for (j, &v) in xv.row_slice(i).iter().enumerate() {
                        if v > vals[j] {
                            vals[j] = v;
                            arg[j] = i;
                        }
                    }
                }
                (vec![1, n], vals, arg)
            }
            1 => {
                let mut vals = Vec::with_capacity(m);
                let mut arg = Vec::with_capacity(m);
                for i in 0..m {
                    let row = xv.row_slice(i);
                    let mut best = 0;
                    for j in 1..n {
                        if row[j] > row[best] {
                            best = j;
                        }
                    }
                    vals.push(row[best]);
                    arg.push(best);
                }
                (vec![m, 1], vals, arg)
            }
            _ => return Err(NumericsError::Invalid(format!("max_axis: bad axis {axis}"))),
        };
        let out = Tensor::new(shape, vals)?;
        self.push("max_axis", out, Op::MaxAxis { x, axis, arg }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = ordered_sum(self.value(x).data().iter().copied());
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(NumericsError::Invalid("mean of an empty tensor".into()));
        }
        let s = ordered_sum(v.data().iter().copied()) / v.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Block `rows r0..r1`, `cols c0..c1`.
    pub fn slice(&mut self, x: Var, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Result<Var> {
        let (m, n) = self.val2(x, "slice")?;
        if rows.end > m || cols.end > n || rows.start > rows.end || cols.start > cols.end {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice",
                index: rows.end.max(cols.end),
                extent: m.max(n),
            });
        }
        let xv = self.value(x);
        let (h, w) = (rows.len(), cols.len());
        let mut data = Vec::with_capacity(h * w);
        for i in rows.clone() {
            data.extend_from_slice(&xv.data()[i * n + cols.start..i * n + cols.end]);
        }
        let out = Tensor::new(vec![h, w], data)?;
        let op = Op::Slice {
            x,
            r0: rows.start,
            c0: cols.start,
        };
        self.push("slice", out, op, &[x])
    }

    /// Concatenate along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| NumericsError::Invalid("concat of zero parts".into()))?;
        let (m0, n0) = self.val2(first, "concat")?;
        let out = match axis {
            0 => {
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let (m, n) = self.val2(p, "concat")?;
                    if n != n0 {
                        return Err(mismatch("concat", self.value(first), self.value(p)));
                    }
                    data.extend_from_slice(self.value(p).data());
                    rows += m;
                }
                Tensor::new(vec![rows, n0], data)?
            }
            1 => {
                let mut widths = Vec::with_capacity(parts.len());
                for &p in parts {
                    let (m, n) = self.val2(p, "concat")?;
                    if m != m0 {
                        return Err(mismatch("concat", self.value(first), self.value(p)));
                    }
                    widths.push(n);
                }
                let total: usize = widths.iter().sum();
                let mut data = Vec::with_capacity(m0 * total);
                for i in 0..m0 {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Tensor::new(vec![m0, total], data)?
            }
            _ => return Err(NumericsError::Invalid(format!("concat: bad axis {axis}"))),
        };
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        self.push("concat", out, op, parts)
    }

    /// Scale every row to unit Euclidean norm. Zero rows are rejected.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.val2(x, "normalize_rows")?;
        let mut data = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &mut data[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(NumericsError::Invalid(format!("normalize_rows: row {i} has zero norm")));
            }
            for v in row.iter_mut() {
                *v /= norm;
            }
            norms.push(norm);
        }
        let out = Tensor::new(vec![m, n], data)?;
        self.push("normalize_rows", out, Op::NormalizeRows { x, norms }, &[x])
    }

    /// `out[i] = x[i, cols[i]]`, shape `m x 1`.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (m, n) = self.val2(x, "pick")?;
        if cols.len() != m {
            return Err(NumericsError::ShapeMismatch {
                op: "pick",
                lhs: vec![m, n],
                rhs: vec![cols.len()],
            });
        }
        let xv = self.value(x);
        let mut data = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(NumericsError::IndexOutOfRange {
                    op: "pick",
                    index: c,
                    extent: n,
                });
            }
            data.push(xv.at(i, c));
        }
        let out = Tensor::new(vec![m, 1], data)?;
        let op = Op::Pick { x, cols: cols.to_vec() };
        self.push("pick", out, op, &[x])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(NumericsError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let shape = y.shape().to_vec();
        let zip_map = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = g.data().iter().zip(a.data()).map(|(&gg, &av)| f(gg, av)).collect();
            Tensor::new(shape.clone(), data).expect("shape preserved")
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, matmul_nt(g, bv));
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, matmul_tn(av, g));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, zip_map(bv, &|gg, bb| gg * bb));
                self.accumulate(grads, *b, zip_map(av, &|gg, aa| gg * aa));
            }
            Op::AddRow(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, col_sums(g));
                }
            }
            Op::MulRow(x, gam) => {
                let (xv, gv) = (self.value(*x), self.value(*gam));
                let n = xv.cols();
                if self.requires_grad(*x) {
                    let data = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(k, &gg)| gg * gv.data()[k % n])
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(shape.clone(), data).unwrap());
                }
                if self.requires_grad(*gam) {
                    let prod = zip_map(xv, &|gg, xx| gg * xx);
                    self.accumulate(grads, *gam, col_sums(&prod));
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * s)),
            Op::MulScalar(x, s) => {
                let (xv, sv) = (self.value(*x), self.value(*s).data()[0]);
                self.accumulate(grads, *x, g.map(|v| v * sv));
                if self.requires_grad(*s) {
                    let ds: f64 = g.data().iter().zip(xv.data()).map(|(a, b)| a * b).sum();
                    self.accumulate(grads, *s, Tensor::scalar(ds));
                }
            }
            Op::MulConst(x, c) => self.accumulate(grads, *x, zip_map(c, &|gg, cc| gg * cc)),
            Op::Transpose(x) => self.accumulate(grads, *x, g.transpose().unwrap()),
            Op::Softmax(x) => {
                let (m, n) = (y.rows(), y.cols());
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        data[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, data).unwrap());
            }
            Op::LogSoftmax(x) => {
                let (m, n) = (y.rows(), y.cols());
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let gs: f64 = gr.iter().sum();
                    for j in 0..n {
                        data[i * n + j] = gr[j] - yr[j].exp() * gs;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, data).unwrap());
            }
            Op::LayerNorm { x, rstd } => {
                let (m, n) = (y.rows(), y.cols());
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        data[i * n + j] = rstd[i] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, data).unwrap());
            }
            Op::Tanh(x) => self.accumulate(grads, *x, zip_map(y, &|gg, t| gg * (1.0 - t * t))),
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let d = zip_map(xv, &|gg, v| {
                    let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                    let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                    gg * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                });
                self.accumulate(grads, *x, d);
            }
            Op::Exp(x) => self.accumulate(grads, *x, zip_map(y, &|gg, e| gg * e)),
            Op::Abs(x) => {
                let xv = self.value(*x);
                let d = zip_map(xv, &|gg, v| {
                    if v > 0.0 {
                        gg
                    } else if v < 0.0 {
                        -gg
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *x, d);
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                self.accumulate(grads, *x, zip_map(xv, &|gg, v| 2.0 * v * gg));
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let c = tv.cols();
                let mut acc = Tensor::zeros(tv.shape());
                let out = acc.data_mut();
                for (k, &id) in ids.iter().enumerate() {
                    for (o, &gg) in out[id * c..(id + 1) * c].iter_mut().zip(g.row_slice(k)) {
                        *o += gg;
                    }
                }
                self.accumulate(grads, *table, acc);
            }
            Op::MaskedFill { x, mask } => {
                let data = g
                    .data()
                    .iter()
                    .zip(mask)
                    .map(|(&gg, &m)| if m { 0.0 } else { gg })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(shape, data).unwrap());
            }
            Op::MaxAxis { x, axis, arg } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut acc = Tensor::zeros(xv.shape());
                let out = acc.data_mut();
                for (k, &a) in arg.iter().enumerate() {
                    let flat = if *axis == 0 { a * n + k } else { k * n + a };
                    out[flat] += g.data()[k];
                }
                self.accumulate(grads, *x, acc);
            }
            Op::Sum(x) => {
                let gs = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.value(*x).shape(), gs));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let gs = g.data()[0] / xv.len() as f64;
                self.accumulate(grads, *x, Tensor::full(xv.shape(), gs));
            }
            Op::Slice { x, r0, c0 } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let (h, w) = (y.rows(), y.cols());
                let mut acc = Tensor::zeros(xv.shape());
                let out = acc.data_mut();
                for i in 0..h {
                    let base = (r0 + i) * n + c0;
                    out[base..base + w].copy_from_slice(g.row_slice(i));
                }
                self.accumulate(grads, *x, acc);
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (pm, pn) = (pv.rows(), pv.cols());
                    let part = if *axis == 0 {
                        let n = g.cols();
                        let d = g.data()[offset * n..(offset + pm) * n].to_vec();
                        offset += pm;
                        Tensor::new(vec![pm, pn], d).unwrap()
                    } else {
                        let mut d = Vec::with_capacity(pm * pn);
                        for i in 0..pm {
                            d.extend_from_slice(&g.row_slice(i)[offset..offset + pn]);
                        }
                        offset += pn;
                        Tensor::new(vec![pm, pn], d).unwrap()
                    };
                    self.accumulate(grads, p, part);
                }
            }
            Op::NormalizeRows { x, norms } => {
                let (m, n) = (y.rows(), y.cols());
                let mut data = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (y.row_slice(i), g.row_slice(i));
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        data[i * n + j] = (gr[j] - yr[j] * dot) / norms[i];
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, data).unwrap());
            }
            Op::Pick { x, cols } => {
                let xv = self.value(*x);
                let n = xv.cols();
                let mut acc = Tensor::zeros(xv.shape());
                let out = acc.data_mut();
                for (i, &c) in cols.iter().enumerate() {
                    out[i * n + c] += g.data()[i];
                }
                self.accumulate(grads, *x, acc);
            }
        }
    }
}

fn col_sums(t: &Tensor) -> Tensor {
    let (m, n) = (t.rows(), t.cols());
    let mut out = vec![0.0; n];
    for i in 0..m {
        for (o, v) in out.iter_mut().zip(t.row_slice(i)) {
            *o += v;
        }
    }
    Tensor::new(vec![1, n], out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reductions_ignore_input_order() {
        let a = [1e16, 1.0, -1e16, 3.5, 1e-3, 2.0];
        let b = [2.0, 1e-3, -1e16, 1.0, 3.5, 1e16];
        let run = |x: &[f64]| {
            let mut g = Graph::new();
            let v = g.constant(Tensor::row(x));
            let s = g.sum(v).unwrap();
            let ls = g.log_softmax(v).unwrap();
            (g.value(s).item().unwrap(), g.value(ls).data().to_vec())
        };
        let (sa, la) = run(&a);
        let (sb, lb) = run(&b);
        assert_eq!(sa, sb);
        for (i, j) in [(0, 5), (1, 3), (3, 4), (5, 0)] {
            assert_eq!(la[i], lb[j]);
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn max_over_rows() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1., 2., 3., 4.], vec![5., 0., 0., 6.]]).unwrap());
        let y = g.max_axis(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[5., 2., 3., 6.]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::row(&[3.0; 6]));
        let y = g.layer_norm(x, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_rows_standardized() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[vec![1., 2., 4., 9.], vec![-3., 0.5, 2., 7.]]).unwrap());
        let y = g.layer_norm(x, 0.0).unwrap();
        for i in 0..2 {
            let r = g.value(y).row_slice(i);
            let mean = r.iter().sum::<f64>() / 4.0;
            let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[3, 2]));
        let msg = g.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::row(&[1.0, 2.0]));
        let p = g.param(Tensor::row(&[3.0, 4.0]));
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn two_paths_accumulate() {
        // f = sum(x*x) + sum(3x)  =>  df/dx = 2x + 3
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[1.0, -2.0]));
        let sq = g.mul(x, x).unwrap();
        let a = g.sum(sq).unwrap();
        let t = g.scale(x, 3.0).unwrap();
        let b = g.sum(t).unwrap();
        let f = g.add(a, b).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn non_finite_is_reported() {
        let mut g = Graph::new().with_finiteness_check(true);
        let x = g.constant(Tensor::row(&[1000.0]));
        assert!(matches!(g.exp(x), Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::row(&[1.0, 2.0]));
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(NumericsError::NotScalar(_))));
    }
}

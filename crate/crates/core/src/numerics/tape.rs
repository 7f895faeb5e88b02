//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Operations are appended in execution order, so the node list is already
//! topologically sorted. `backward` walks it once in reverse.

use super::kernels;
use super::params::{ParamId, ParamSet};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Gelu(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    /// Per-row standardization; keeps `1/sqrt(var+eps)` for each row.
    Standardize(Var, Vec<f64>),
    /// Per-row L2 normalization; keeps each row's norm.
    NormalizeRows(Var, Vec<f64>),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherRows(Var, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Matmul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::DivScalar(..) => "div_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Gelu(..) => "gelu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::Standardize(..) => "standardize_rows",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::Transpose(..) => "transpose",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::MeanRows(..) => "mean_rows",
            Op::GatherRows(..) => "gather_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Matmul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::MulRow(a, b)
            | Op::DivScalar(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Gelu(a)
            | Op::SoftmaxRows(a)
            | Op::LogSoftmaxRows(a)
            | Op::Standardize(a, _)
            | Op::NormalizeRows(a, _)
            | Op::Transpose(a)
            | Op::SliceRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::GatherRows(a, _) => vec![*a],
            Op::ConcatRows(parts) => parts.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    tensor: Tensor,
    op: Op,
}

/// Variance floor used by [`Tape::standardize_rows`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Recorded computation. Parameters from an optional [`ParamSet`] are bound
/// lazily as leaves the first time [`Tape::param`] asks for them.
pub struct Tape<'p> {
    nodes: Vec<Node>,
    params: Option<&'p ParamSet>,
    bound: Vec<Option<Var>>,
    params_require_grad: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: None,
            bound: Vec::new(),
            params_require_grad: false,
        }
    }

    pub fn with_params(params: &'p ParamSet, requires_grad: bool) -> Self {
        Self {
            nodes: Vec::new(),
            params: Some(params),
            bound: vec![None; params.len()],
            params_require_grad: requires_grad,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_unchecked(tensor.with_requires_grad(false), Op::Leaf)
    }

    pub fn leaf(&mut self, tensor: Tensor, requires_grad: bool) -> Var {
        self.push_unchecked(tensor.with_requires_grad(requires_grad), Op::Leaf)
    }

    /// Leaf for a bound parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let params = self.params.expect("tape has no parameter set bound");
        let t = params.get(id).clone();
        let v = self.leaf(t, self.params_require_grad);
        self.bound[id.0] = Some(v);
        v
    }

    /// Bound leaf for a parameter, if the forward pass touched it.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.bound.get(id.0).copied().flatten()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].tensor.grad()
    }

    /// Gradient of a parameter after `backward`, zero-filled when the
    /// parameter did not influence the loss.
    pub fn param_grad(&self, id: ParamId) -> Option<Vec<f64>> {
        let params = self.params?;
        let numel = params.get(id).numel();
        Some(match self.param_var(id).and_then(|v| self.grad(v)) {
            Some(g) => g.to_vec(),
            None => vec![0.0; numel],
        })
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad()
    }

    fn push_unchecked(&mut self, tensor: Tensor, op: Op) -> Var {
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> Result<Var> {
        if !values.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = op.inputs().iter().any(|&i| self.requires_grad(i));
        let tensor = Tensor::new(shape, values)?.with_requires_grad(requires_grad);
        Ok(self.push_unchecked(tensor, op))
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            _ => Err(Error::Shape {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let values = t.values().iter().map(|&v| f(v)).collect();
        self.push(shape, values, op)
    }

    // ── forward ops ────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = kernels::matmul(self.value(a).values(), self.value(b).values(), m, k, n);
        self.push(vec![m, n], out, Op::Matmul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = zip_with(self.value(a), self.value(b), |x, y| x + y);
        self.push(self.shape(a).to_vec(), out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = zip_with(self.value(a), self.value(b), |x, y| x - y);
        self.push(self.shape(a).to_vec(), out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = zip_with(self.value(a), self.value(b), |x, y| x * y);
        self.push(self.shape(a).to_vec(), out, Op::Mul(a, b))
    }

    fn check_row(&self, op: &'static str, x: Var, row: Var) -> Result<(usize, usize)> {
        let (n, d) = self.matrix_dims(op, x)?;
        let r = self.value(row);
        let ok = r.numel() == d && (r.shape().len() == 1 || r.rows() == 1);
        if !ok {
            return Err(Error::Shape {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: r.shape().to_vec(),
            });
        }
        Ok((n, d))
    }

    /// `x[i,:] + row` for every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, d) = self.check_row("add_row", x, row)?;
        let r = self.value(row).values();
        let out = self
            .value(x)
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v + r[i % d])
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::AddRow(x, row))
    }

    /// `x[i,:] ⊙ row` for every row of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, d) = self.check_row("mul_row", x, row)?;
        let r = self.value(row).values();
        let out = self
            .value(x)
            .values()
            .iter()
            .enumerate()
            .map(|(i, v)| v * r[i % d])
            .collect();
        self.push(self.shape(x).to_vec(), out, Op::MulRow(x, row))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    /// Divides every entry of `x` by the scalar node `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar() {
            return Err(Error::Shape {
                op: "div_scalar",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let d = self.value(s).item();
        self.map(x, Op::DivScalar(x, s), |v| v / d)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Log(x), f64::ln)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Gelu(x), kernels::gelu)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("softmax_rows", x)?;
        let mut out = vec![0.0; r * c];
        let src = self.value(x).values();
        for i in 0..r {
            kernels::softmax_row(&src[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        self.push(vec![r, c], out, Op::SoftmaxRows(x))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("log_softmax_rows", x)?;
        let mut out = vec![0.0; r * c];
        let src = self.value(x).values();
        for i in 0..r {
            kernels::log_softmax_row(&src[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
        }
        self.push(vec![r, c], out, Op::LogSoftmaxRows(x))
    }

    /// `(x − mean) / sqrt(var + LAYER_NORM_EPS)` per row, population variance.
    pub fn standardize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("standardize_rows", x)?;
        if c < 2 {
            return Err(Error::Contract(
                "row standardization needs at least two columns".into(),
            ));
        }
        let src = self.value(x).values();
        let mut out = vec![0.0; r * c];
        let mut inv_std = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.push(vec![r, c], out, Op::Standardize(x, inv_std))
    }

    /// Scales every row to unit L2 norm. All-zero rows stay zero.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let shape = t.shape().to_vec();
        let src = t.values();
        let mut out = vec![0.0; r * c];
        let mut norms = Vec::with_capacity(r);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let norm = kernels::dot(row, row).sqrt().max(1e-12);
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / norm;
            }
            norms.push(norm);
        }
        self.push(shape, out, Op::NormalizeRows(x, norms))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", x)?;
        let out = kernels::transpose(self.value(x).values(), r, c);
        self.push(vec![c, r], out, Op::Transpose(x))
    }

    /// Stacks matrices with equal column count along the row (sequence) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let c = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.cols() != c || t.shape().len() > 2 {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first).to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.rows();
            out.extend_from_slice(t.values());
        }
        self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims("slice_rows", x)?;
        if len == 0 || start + len > r {
            return Err(Error::Contract(format!(
                "slice_rows {start}..{} out of range for {r} rows",
                start + len
            )));
        }
        let out = self.value(x).values()[start * c..(start + len) * c].to_vec();
        self.push(vec![len, c], out, Op::SliceRows(x, start))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut s = 0.0;
        for v in self.value(x).values() {
            s += v;
        }
        self.push(vec![1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let mut s = 0.0;
        for v in t.values() {
            s += v;
        }
        let m = s / t.numel() as f64;
        self.push(vec![1], vec![m], Op::Mean(x))
    }

    /// Column means of a matrix, as a `[1, c]` matrix.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("mean_rows", x)?;
        let src = self.value(x).values();
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        self.push(vec![1, c], out, Op::MeanRows(x))
    }

    /// Row lookup: output row `i` is `table[indices[i]]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims("gather_rows", table)?;
        if indices.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::Contract(format!(
                "gather_rows index {bad} out of range for {r} rows"
            )));
        }
        let src = self.value(table).values();
        let mut out = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            vec![indices.len(), c],
            out,
            Op::GatherRows(table, indices.to_vec()),
        )
    }

    /// Views a 1-D tensor of length `d` as a `[1, d]` matrix.
    pub fn as_row(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() == 2 && t.rows() == 1 {
            return Ok(x);
        }
        let d = t.numel();
        // A one-part concat has an identity backward.
        let values = t.values().to_vec();
        let op = Op::ConcatRows(vec![x]);
        self.push(vec![1, d], values, op)
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Accumulates d(loss)/d(node) into every node that requires a gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].tensor.requires_grad() {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        for (idx, g) in grads.into_iter().enumerate() {
            if let Some(g) = g {
                if !g.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite("backward"));
                }
                if self.nodes[idx].tensor.requires_grad() {
                    self.nodes[idx].tensor.set_grad(g);
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = node.tensor.values();
        let mut acc = |v: Var, contrib: Vec<f64>| {
            if !self.requires_grad(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, c) in existing.iter_mut().zip(contrib) {
                        *e += c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };
        let val = |v: Var| self.nodes[v.0].tensor.values();

        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    acc(*a, kernels::matmul_bt(g, val(*b), m, n, k));
                }
                if self.requires_grad(*b) {
                    acc(*b, kernels::matmul_at(val(*a), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|x| -x).collect());
            }
            Op::AddRow(x, row) => {
                let d = self.value(*row).numel();
                acc(*x, g.to_vec());
                let mut gr = vec![0.0; d];
                for (i, gi) in g.iter().enumerate() {
                    gr[i % d] += gi;
                }
                acc(*row, gr);
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, g.iter().zip(vb).map(|(g, y)| g * y).collect());
                acc(*b, g.iter().zip(va).map(|(g, x)| g * x).collect());
            }
            Op::MulRow(x, row) => {
                let (vx, vr) = (val(*x), val(*row));
                let d = vr.len();
                acc(
                    *x,
                    g.iter().enumerate().map(|(i, g)| g * vr[i % d]).collect(),
                );
                let mut gr = vec![0.0; d];
                for (i, (gi, xi)) in g.iter().zip(vx).enumerate() {
                    gr[i % d] += gi * xi;
                }
                acc(*row, gr);
            }
            Op::Scale(x, c) => acc(*x, g.iter().map(|g| g * c).collect()),
            Op::DivScalar(x, s) => {
                let sv = val(*s)[0];
                acc(*x, g.iter().map(|g| g / sv).collect());
                let mut ds = 0.0;
                for (gi, xi) in g.iter().zip(val(*x)) {
                    ds += gi * xi;
                }
                acc(*s, vec![-ds / (sv * sv)]);
            }
            Op::Exp(x) => acc(*x, g.iter().zip(out).map(|(g, y)| g * y).collect()),
            Op::Log(x) => acc(*x, g.iter().zip(val(*x)).map(|(g, x)| g / x).collect()),
            Op::Gelu(x) => acc(
                *x,
                g.iter()
                    .zip(val(*x))
                    .map(|(g, &x)| g * kernels::gelu_grad(x))
                    .collect(),
            ),
            Op::SoftmaxRows(x) => {
                let c = node.tensor.cols();
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(c).zip(out.chunks(c)).zip(dx.chunks_mut(c)) {
                    let s = kernels::dot(gr, yr);
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - s);
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmaxRows(x) => {
                let c = node.tensor.cols();
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(c).zip(out.chunks(c)).zip(dx.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = gi - yi.exp() * s;
                    }
                }
                acc(*x, dx);
            }
            Op::Standardize(x, inv_std) => {
                let c = node.tensor.cols();
                let cf = c as f64;
                let mut dx = vec![0.0; g.len()];
                for (i, ((gr, yr), dr)) in g
                    .chunks(c)
                    .zip(out.chunks(c))
                    .zip(dx.chunks_mut(c))
                    .enumerate()
                {
                    let mean_g = gr.iter().sum::<f64>() / cf;
                    let mean_gy = kernels::dot(gr, yr) / cf;
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = inv_std[i] * (gi - mean_g - yi * mean_gy);
                    }
                }
                acc(*x, dx);
            }
            Op::NormalizeRows(x, norms) => {
                let c = node.tensor.cols();
                let mut dx = vec![0.0; g.len()];
                for (i, ((gr, yr), dr)) in g
                    .chunks(c)
                    .zip(out.chunks(c))
                    .zip(dx.chunks_mut(c))
                    .enumerate()
                {
                    let gy = kernels::dot(gr, yr);
                    for ((d, gi), yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = (gi - yi * gy) / norms[i];
                    }
                }
                acc(*x, dx);
            }
            Op::Transpose(x) => {
                let (r, c) = (node.tensor.shape()[0], node.tensor.shape()[1]);
                acc(*x, kernels::transpose(g, r, c));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    acc(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::SliceRows(x, start) => {
                let c = node.tensor.cols();
                let mut dx = vec![0.0; self.value(*x).numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                acc(*x, dx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::MeanRows(x) => {
                let r = self.value(*x).rows();
                let mut dx = Vec::with_capacity(r * g.len());
                for _ in 0..r {
                    dx.extend(g.iter().map(|gi| gi / r as f64));
                }
                acc(*x, dx);
            }
            Op::GatherRows(table, indices) => {
                let c = node.tensor.cols();
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (k, &i) in indices.iter().enumerate() {
                    for (d, gi) in dt[i * c..(i + 1) * c].iter_mut().zip(&g[k * c..(k + 1) * c]) {
                        *d += gi;
                    }
                }
                acc(*table, dt);
            }
        }
        Ok(())
    }
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.values()
        .iter()
        .zip(b.values())
        .map(|(&x, &y)| f(x, y))
        .collect()
}

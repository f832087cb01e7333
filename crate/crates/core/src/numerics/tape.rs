//! Reverse-mode differentiation over dense matrices.
//!
//! Every value lives on a [`Tape`] as a row-major matrix. Operations append a
//! node holding the forward value together with the inputs it was built from;
//! [`Tape::backward`] walks the nodes in reverse order and applies each local
//! vector-Jacobian rule once.

use std::borrow::Cow;

use super::tensor::{gemm_nn, gemm_nt, gemm_tn, log_softmax_into, softmax_into, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Variance floor used by instance normalization.
pub const NORM_EPS: f64 = 1e-10;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sum(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    PickPerRow(Var, Vec<usize>),
    InstanceNorm(Var, Vec<f64>),
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    rows: usize,
    cols: usize,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
///
/// Leaves may borrow their storage (parameters are never copied onto the tape).
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after `len`. Only sound when no surviving
    /// handle refers to the dropped nodes; used to bound memory in
    /// inference loops.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.clear();
    }

    fn push(&mut self, value: Cow<'a, [f64]>, rows: usize, cols: usize, op: Op, rg: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            value,
            rows,
            cols,
            op,
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies a node out as a tensor (with its gradient, if backward reached it).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        let mut t = Tensor::new(vec![n.rows, n.cols], n.value.to_vec())
            .expect("node storage matches its dims");
        t.requires_grad = n.requires_grad;
        t.grad = self.grad(v).map(<[f64]>::to_vec);
        t
    }

    /// Records a constant (no gradient) matrix.
    pub fn constant(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Result<Var, NumericsError> {
        if data.len() != rows * cols {
            return Err(NumericsError::Shape(format!(
                "constant {}x{} given {} values",
                rows,
                cols,
                data.len()
            )));
        }
        Ok(self.push(Cow::Owned(data), rows, cols, Op::Leaf, false))
    }

    /// Records a tensor leaf, borrowing its storage.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        let (rows, cols) = t.matrix_dims();
        self.push(Cow::Borrowed(t.data()), rows, cols, Op::Leaf, t.requires_grad)
    }

    /// Records an owned tensor leaf.
    pub fn leaf_owned(&mut self, t: Tensor) -> Var {
        let (rows, cols) = t.matrix_dims();
        let rg = t.requires_grad;
        self.push(Cow::Owned(t.into_data()), rows, cols, Op::Leaf, rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(NumericsError::Shape(format!(
                "matmul inner dimensions differ: [{m}, {k}] x [{k2}, {n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(NumericsError::Shape(format!(
                "matmul_t inner dimensions differ: [{m}, {k}] x [{n}, {k2}]^T"
            )));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Cow::Owned(out), m, n, Op::MatMulT(a, b), rg))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<(usize, usize), NumericsError> {
        let da = self.dims(a);
        let db = self.dims(b);
        if da != db {
            return Err(NumericsError::Shape(format!(
                "{what}: [{}, {}] vs [{}, {}]",
                da.0, da.1, db.0, db.1
            )));
        }
        Ok(da)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.same_dims(a, b, "add")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Cow::Owned(out), r, c, Op::Add(a, b), rg))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a);
        let (br, bc) = self.dims(row);
        if br != 1 || bc != c {
            return Err(NumericsError::Shape(format!(
                "add_row: [{r}, {c}] + [{br}, {bc}]"
            )));
        }
        let bias = self.value(row);
        let out: Vec<f64> = self
            .value(a)
            .chunks(c)
            .flat_map(|chunk| chunk.iter().zip(bias).map(|(x, y)| x + y))
            .collect();
        let rg = self.requires_grad(a) || self.requires_grad(row);
        Ok(self.push(Cow::Owned(out), r, c, Op::AddRow(a, row), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (r, c) = self.same_dims(a, b, "mul")?;
        let out: Vec<f64> = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.requires_grad(a) || self.requires_grad(b);
        Ok(self.push(Cow::Owned(out), r, c, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().map(|x| x * factor).collect();
        let rg = self.requires_grad(a);
        self.push(Cow::Owned(out), r, c, Op::Scale(a, factor), rg)
    }

    /// Elementwise ReLU; the subgradient at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().map(|&x| super::tensor::relu(x)).collect();
        let rg = self.requires_grad(a);
        self.push(Cow::Owned(out), r, c, Op::Relu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let out: Vec<f64> = self.value(a).iter().map(|x| x.tanh()).collect();
        let rg = self.requires_grad(a);
        self.push(Cow::Owned(out), r, c, Op::Tanh(a), rg)
    }

    /// `clip · tanh(a)`.
    pub fn tanh_clip(&mut self, a: Var, clip: f64) -> Var {
        let t = self.tanh(a);
        self.scale(t, clip)
    }

    /// Sum of all entries, as a 1×1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).iter().sum();
        let rg = self.requires_grad(a);
        self.push(Cow::Owned(vec![total]), 1, 1, Op::Sum(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let rows = parts.first().map(|&p| self.dims(p).0).ok_or_else(|| {
            NumericsError::Shape("concat_cols of nothing".into())
        })?;
        if parts.iter().any(|&p| self.dims(p).0 != rows) {
            return Err(NumericsError::Shape("concat_cols: row counts differ".into()));
        }
        let cols: usize = parts.iter().map(|&p| self.dims(p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.dims(p).1;
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Cow::Owned(out), rows, cols, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let cols = parts.first().map(|&p| self.dims(p).1).ok_or_else(|| {
            NumericsError::Shape("concat_rows of nothing".into())
        })?;
        if parts.iter().any(|&p| self.dims(p).1 != cols) {
            return Err(NumericsError::Shape("concat_rows: column counts differ".into()));
        }
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            out.extend_from_slice(self.value(p));
            rows += self.dims(p).0;
        }
        let rg = parts.iter().any(|&p| self.requires_grad(p));
        Ok(self.push(Cow::Owned(out), rows, cols, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start + width` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a);
        if start + width > c {
            return Err(NumericsError::Shape(format!(
                "slice_cols {start}..{} of [{r}, {c}]",
                start + width
            )));
        }
        let src = self.value(a);
        let out: Vec<f64> = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + width].iter().copied())
            .collect();
        let rg = self.requires_grad(a);
        Ok(self.push(Cow::Owned(out), r, width, Op::SliceCols(a, start), rg))
    }

    /// Rows of `a` selected by `index` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(NumericsError::Shape(format!("gather_rows: row {bad} of {r}")));
        }
        let src = self.value(a);
        let out: Vec<f64> = index
            .iter()
            .flat_map(|&i| src[i * c..(i + 1) * c].iter().copied())
            .collect();
        let rg = self.requires_grad(a);
        Ok(self.push(
            Cow::Owned(out),
            index.len(),
            c,
            Op::GatherRows(a, index.to_vec()),
            rg,
        ))
    }

    fn check_mask(&self, a: Var, mask: Option<&[bool]>) -> Result<(), NumericsError> {
        if let Some(m) = mask {
            let (r, c) = self.dims(a);
            if m.len() != r * c {
                return Err(NumericsError::Shape(format!(
                    "mask of length {} for [{r}, {c}]",
                    m.len()
                )));
            }
        }
        Ok(())
    }

    /// Row-wise softmax; `mask` (row-major, `true` = allowed) zeroes entries.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        self.check_mask(a, mask)?;
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        let src = self.value(a);
        for i in 0..r {
            let m = mask.map(|m| &m[i * c..(i + 1) * c]);
            softmax_into(&src[i * c..(i + 1) * c], m, &mut out[i * c..(i + 1) * c])?;
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Cow::Owned(out), r, c, Op::SoftmaxRows(a), rg))
    }

    /// Row-wise log-softmax; masked entries hold `-inf` and receive no gradient.
    pub fn log_softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        self.check_mask(a, mask)?;
        let (r, c) = self.dims(a);
        let mut out = vec![0.0; r * c];
        let src = self.value(a);
        for i in 0..r {
            let m = mask.map(|m| &m[i * c..(i + 1) * c]);
            log_softmax_into(&src[i * c..(i + 1) * c], m, &mut out[i * c..(i + 1) * c])?;
        }
        let rg = self.requires_grad(a);
        Ok(self.push(Cow::Owned(out), r, c, Op::LogSoftmaxRows(a), rg))
    }

    /// Picks `a[i, index[i]]` for every row, giving an `r×1` column.
    pub fn pick_per_row(&mut self, a: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let (r, c) = self.dims(a);
        if index.len() != r || index.iter().any(|&j| j >= c) {
            return Err(NumericsError::Shape(format!(
                "pick_per_row: {} indices for [{r}, {c}]",
                index.len()
            )));
        }
        let src = self.value(a);
        let out: Vec<f64> = index.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        let rg = self.requires_grad(a);
        Ok(self.push(Cow::Owned(out), r, 1, Op::PickPerRow(a, index.to_vec()), rg))
    }

    /// Normalizes every column across the rows (the node axis) to zero mean
    /// and unit variance, without affine parameters.
    pub fn instance_norm(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.value(a);
        let mut mean = vec![0.0; c];
        for row in src.chunks(c) {
            mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
        }
        mean.iter_mut().for_each(|m| *m /= r as f64);
        let mut var = vec![0.0; c];
        for row in src.chunks(c) {
            for j in 0..c {
                let d = row[j] - mean[j];
                var[j] += d * d;
            }
        }
        let inv_std: Vec<f64> = var
            .iter()
            .map(|v| 1.0 / (v / r as f64 + NORM_EPS).sqrt())
            .collect();
        let out: Vec<f64> = src
            .chunks(c)
            .flat_map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, x)| (x - mean[j]) * inv_std[j])
                    .collect::<Vec<_>>()
            })
            .collect();
        let rg = self.requires_grad(a);
        self.push(Cow::Owned(out), r, c, Op::InstanceNorm(a, inv_std), rg)
    }

    /// Gradient of the most recent backward pass with respect to `v`.
    /// Sign pattern (`> 0`) of every ReLU input on the tape, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(a) => Some(self.nodes[a.0].value.iter().map(|&x| x > 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Reverse sweep from a scalar `loss`. Every node that requires a
    /// gradient and lies on a path to `loss` receives one.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        let (r, c) = self.dims(loss);
        if r * c != 1 {
            return Err(NumericsError::Shape(format!(
                "backward needs a scalar loss, got [{r}, {c}]"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let (rows, cols) = (node.rows, node.cols);
        // `slot(v)` hands out the accumulation buffer of an input that wants a gradient.
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                if self.nodes[v.0].requires_grad {
                    let len = self.nodes[v.0].value.len();
                    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
                } else {
                    None
                }
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if let Some(ga) = slot!(*a) {
                    gemm_nt(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = slot!(*b) {
                    gemm_tn(self.value(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if let Some(ga) = slot!(*a) {
                    gemm_nn(g, self.value(*b), ga, m, n, k);
                }
                if let Some(gb) = slot!(*b) {
                    gemm_tn(g, self.value(*a), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot!(v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = slot!(*bias) {
                    for row in g.chunks(cols) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = slot!(*a) {
                    let bv = self.value(*b);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = slot!(*b) {
                    let av = self.value(*a);
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * f);
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = slot!(*a) {
                    let av = self.value(*a);
                    for i in 0..g.len() {
                        if av[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = slot!(*a) {
                    let y = &node.value;
                    for i in 0..g.len() {
                        ga[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = slot!(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    if let Some(gp) = slot!(p) {
                        for r in 0..rows {
                            let src = &g[r * cols + offset..r * cols + offset + pc];
                            gp[r * pc..(r + 1) * pc]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += pc;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = slot!(p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(x, y)| *x += y);
                    }
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let src_cols = self.dims(*a).1;
                if let Some(ga) = slot!(*a) {
                    for r in 0..rows {
                        for j in 0..cols {
                            ga[r * src_cols + start + j] += g[r * cols + j];
                        }
                    }
                }
            }
            Op::GatherRows(a, index) => {
                if let Some(ga) = slot!(*a) {
                    for (r, &src) in index.iter().enumerate() {
                        ga[src * cols..(src + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if let Some(ga) = slot!(*a) {
                    let y = &node.value;
                    for r in 0..rows {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let inner: f64 = ys.iter().zip(gs).map(|(p, q)| p * q).sum();
                        for j in 0..cols {
                            ga[r * cols + j] += ys[j] * (gs[j] - inner);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if let Some(ga) = slot!(*a) {
                    let y = &node.value;
                    for r in 0..rows {
                        let ys = &y[r * cols..(r + 1) * cols];
                        let gs = &g[r * cols..(r + 1) * cols];
                        let total: f64 = ys
                            .iter()
                            .zip(gs)
                            .filter(|(v, _)| v.is_finite())
                            .map(|(_, q)| q)
                            .sum();
                        for j in 0..cols {
                            if ys[j].is_finite() {
                                ga[r * cols + j] += gs[j] - ys[j].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::PickPerRow(a, index) => {
                let src_cols = self.dims(*a).1;
                if let Some(ga) = slot!(*a) {
                    for (r, &j) in index.iter().enumerate() {
                        ga[r * src_cols + j] += g[r];
                    }
                }
            }
            Op::InstanceNorm(a, inv_std) => {
                if let Some(ga) = slot!(*a) {
                    let y = &node.value;
                    let n = rows as f64;
                    let mut mean_g = vec![0.0; cols];
                    let mut mean_gy = vec![0.0; cols];
                    for r in 0..rows {
                        for j in 0..cols {
                            mean_g[j] += g[r * cols + j];
                            mean_gy[j] += g[r * cols + j] * y[r * cols + j];
                        }
                    }
                    for j in 0..cols {
                        mean_g[j] /= n;
                        mean_gy[j] /= n;
                    }
                    for r in 0..rows {
                        for j in 0..cols {
                            let i = r * cols + j;
                            ga[i] += inv_std[j] * (g[i] - mean_g[j] - y[i] * mean_gy[j]);
                        }
                    }
                }
            }
        }
    }
}

//! Reverse-mode tape over rank-2 tensors.
//!
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and backward is a single reverse sweep. A tape is
//! single-threaded; independent tapes may run concurrently.

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sentinel in [`Tape::gather_flat`] indices selecting an implicit zero.
pub const PAD: usize = usize::MAX;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    SumAll(Var),
    SumAxis(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    IndexAddRows(Var, Vec<usize>),
    GatherFlat(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    L2NormalizeRows(Var, f64),
    CosineSimilarity(Var, Var, f64),
    LogSumExpRows(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    }
}

/// `x / (‖x‖ + eps)` applied to one row, returning the norm.
fn normalize_row<T: Real>(x: &[T], out: &mut [T], eps: f64) -> f64 {
    let n = x.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
    let inv = 1.0 / (n + eps);
    for (o, v) in out.iter_mut().zip(x) {
        *o = T::from_f64(v.to_f64() * inv);
    }
    n
}

/// Backward of [`normalize_row`]: accumulates into `gx`.
fn normalize_row_backward<T: Real>(x: &[T], g: &[f64], gx: &mut [T], eps: f64) {
    let n = x.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
    let d = n + eps;
    if n > 0.0 {
        let xg: f64 = x.iter().zip(g).map(|(a, b)| a.to_f64() * b).sum();
        let c = xg / (n * d * d);
        for ((o, xv), gv) in gx.iter_mut().zip(x).zip(g) {
            *o += T::from_f64(gv / d - xv.to_f64() * c);
        }
    } else {
        for (o, gv) in gx.iter_mut().zip(g) {
            *o += T::from_f64(gv / d);
        }
    }
}

/// `C[m,n] = A[m,k] · B[k,n]` with `f64` row accumulators.
fn matmul_into<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let arow = &a[i * k..(i + 1) * k];
        for (p, av) in arow.iter().enumerate() {
            let av = av.to_f64();
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (s, bv) in acc.iter_mut().zip(brow) {
                *s += av * bv.to_f64();
            }
        }
        out.extend(acc.iter().map(|&v| T::from_f64(v)));
    }
    out
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn dims(&self, v: Var) -> Result<(usize, usize)> {
        self.nodes[v.0].value.dims2()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor. Non-finite values are rejected.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        value.dims2()?;
        if !value.all_finite() {
            return Err(Error::NonFinite("leaf"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a)?;
        let (k2, n) = self.dims(b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let data = matmul_into(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a `[1, n]` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let (r, n2) = self.dims(row)?;
        if r != 1 || n != n2 {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let rv = self.value(row).data().to_vec();
        let mut data = self.value(a).data().to_vec();
        for i in 0..m {
            for (x, &b) in data[i * n..(i + 1) * n].iter_mut().zip(&rv) {
                *x += b;
            }
        }
        Ok(self.push(Tensor::new(vec![m, n], data)?, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|v| T::from_f64(v.to_f64() * c))
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Scale(a, c), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        let t = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(t, Op::Relu(a), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v.to_f64()).sum();
        Ok(self.push(Tensor::scalar(T::from_f64(s)), Op::SumAll(a), &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over `axis` (0: rows collapse to `[1, n]`; 1: columns collapse to `[m, 1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let x = self.value(a).data();
        let t = match axis {
            0 => {
                let mut acc = vec![0.0f64; n];
                for i in 0..m {
                    for (s, v) in acc.iter_mut().zip(&x[i * n..(i + 1) * n]) {
                        *s += v.to_f64();
                    }
                }
                Tensor::from_f64(&[1, n], &acc)?
            }
            1 => {
                let acc: Vec<f64> = (0..m)
                    .map(|i| x[i * n..(i + 1) * n].iter().map(|v| v.to_f64()).sum())
                    .collect();
                Tensor::from_f64(&[m, 1], &acc)?
            }
            _ => return Err(shape_err("sum_axis", self.shape(a), &[axis])),
        };
        Ok(self.push(t, Op::SumAxis(a, axis), &[a]))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let len = if axis == 0 { m } else { n };
        if len == 0 {
            return Err(Error::EmptyBatch);
        }
        let s = self.sum_axis(a, axis)?;
        self.scale(s, 1.0 / len as f64)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyBatch)?;
        let (m, _) = self.dims(first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pm != m {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(Tensor::new(vec![m, total], data)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyBatch)?;
        let (_, n) = self.dims(first)?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims(p)?;
            if pn != n {
                return Err(shape_err("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pm;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::new(vec![rows, n], data)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows of `a` selected (with repetition) by `idx`.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(shape_err("gather_rows", self.shape(a), &[bad]));
        }
        let x = self.value(a).data();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            data.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(vec![idx.len(), n], data)?;
        Ok(self.push(t, Op::GatherRows(a, idx.to_vec()), &[a]))
    }

    /// `out[target[r]] += a[r]` for every row `r`, in row order; `out` has `rows` rows.
    pub fn index_add_rows(&mut self, a: Var, target: &[usize], rows: usize) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if target.len() != m {
            return Err(shape_err("index_add_rows", self.shape(a), &[target.len()]));
        }
        if let Some(&bad) = target.iter().find(|&&t| t >= rows) {
            return Err(shape_err("index_add_rows", &[rows], &[bad]));
        }
        let x = self.value(a).data();
        let mut acc = vec![0.0f64; rows * n];
        for (r, &t) in target.iter().enumerate() {
            for (s, v) in acc[t * n..(t + 1) * n].iter_mut().zip(&x[r * n..(r + 1) * n]) {
                *s += v.to_f64();
            }
        }
        let t = Tensor::from_f64(&[rows, n], &acc)?;
        Ok(self.push(t, Op::IndexAddRows(a, target.to_vec()), &[a]))
    }

    /// `out.flat[k] = a.flat[idx[k]]`, or zero where `idx[k] == PAD`.
    pub fn gather_flat(&mut self, a: Var, idx: &[usize], shape: [usize; 2]) -> Result<Var> {
        let len = self.value(a).len();
        if idx.len() != shape[0] * shape[1] {
            return Err(shape_err("gather_flat", &shape, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i != PAD && i >= len) {
            return Err(shape_err("gather_flat", self.shape(a), &[bad]));
        }
        let x = self.value(a).data();
        let data = idx
            .iter()
            .map(|&i| if i == PAD { T::ZERO } else { x[i] })
            .collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, Op::GatherFlat(a, idx.to_vec()), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: [usize; 2]) -> Result<Var> {
        if shape[0] * shape[1] != self.value(a).len() {
            return Err(shape_err("reshape", self.shape(a), &shape));
        }
        let t = Tensor::new(shape.to_vec(), self.value(a).data().to_vec())?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let x = self.value(a).data();
        let mut data = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = x[i * n + j];
            }
        }
        let t = Tensor::new(vec![n, m], data)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    /// Row-wise `x / (‖x‖ + eps)`; a zero row maps to zero.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        let x = self.value(a).data();
        let mut data = vec![T::ZERO; m * n];
        for i in 0..m {
            normalize_row(&x[i * n..(i + 1) * n], &mut data[i * n..(i + 1) * n], eps);
        }
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::L2NormalizeRows(a, eps), &[a]))
    }

    /// `C[i][j] = ⟨u_i, v_j⟩ / ((‖u_i‖ + eps)(‖v_j‖ + eps))`.
    pub fn cosine_similarity(&mut self, u: Var, v: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.dims(u)?;
        let (p, d2) = self.dims(v)?;
        if d != d2 {
            return Err(shape_err("cosine_similarity", self.shape(u), self.shape(v)));
        }
        let (un, vn) = (self.normalized(u, eps), self.normalized(v, eps));
        let mut data = Vec::with_capacity(m * p);
        for i in 0..m {
            let ur = &un[i * d..(i + 1) * d];
            for j in 0..p {
                let vr = &vn[j * d..(j + 1) * d];
                data.push(T::from_f64(ur.iter().zip(vr).map(|(a, b)| a * b).sum()));
            }
        }
        let t = Tensor::new(vec![m, p], data)?;
        Ok(self.push(t, Op::CosineSimilarity(u, v, eps), &[u, v]))
    }

    fn normalized(&self, a: Var, eps: f64) -> Vec<f64> {
        let (m, n) = self.dims(a).expect("rank-2");
        let x = self.value(a).data();
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            let row = &x[i * n..(i + 1) * n];
            let norm = row.iter().map(|v| v.to_f64() * v.to_f64()).sum::<f64>().sqrt();
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o = v.to_f64() / (norm + eps);
            }
        }
        out
    }

    /// Row-wise log-sum-exp, `[m, n] -> [m, 1]`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims(a)?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let x = self.value(a).data();
        let out: Vec<f64> = (0..m)
            .map(|i| {
                let row = &x[i * n..(i + 1) * n];
                let mx = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
                mx + row.iter().map(|v| (v.to_f64() - mx).exp()).sum::<f64>().ln()
            })
            .collect();
        let t = Tensor::from_f64(&[m, 1], &out)?;
        Ok(self.push(t, Op::LogSumExpRows(a), &[a]))
    }

    /// Reverse sweep from a scalar `loss`. Returns fresh gradients for every
    /// node that depends on a `requires_grad` leaf.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::ScalarRequired(lv.shape().to_vec()));
        }
        if !lv.all_finite() {
            return Err(Error::NonFinite("loss"));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::ONE]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Grads {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape")))
                .collect(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; len]))
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a).unwrap();
                let (_, n) = self.dims(*b).unwrap();
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = G · Bᵀ
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            let s: f64 = grow.iter().zip(brow).map(|(x, y)| x.to_f64() * y.to_f64()).sum();
                            ga[i * k + p] += T::from_f64(s);
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ · G
                    let mut acc = vec![0.0f64; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p].to_f64();
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (s, gv) in acc[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *s += a_ip * gv.to_f64();
                            }
                        }
                    }
                    for (o, s) in gb.iter_mut().zip(acc) {
                        *o += T::from_f64(s);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, *v) {
                        for (o, &x) in gv.iter_mut().zip(g) {
                            *o += x;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (o, &x) in gb.iter_mut().zip(g) {
                        *o += -x;
                    }
                }
            }
            Op::AddRow(a, row) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
                let (m, n) = self.dims(*a).unwrap();
                if let Some(gr) = self.acc(grads, *row) {
                    for j in 0..n {
                        let s: f64 = (0..m).map(|i| g[i * n + j].to_f64()).sum();
                        gr[j] += T::from_f64(s);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o += x * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                        *o += x * y;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += T::from_f64(x.to_f64() * c);
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    // subgradient 0 at the kink
                    for ((o, &x), &v) in ga.iter_mut().zip(g).zip(av) {
                        if v > T::ZERO {
                            *o += x;
                        }
                    }
                }
            }
            Op::SumAll(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::SumAxis(a, axis) => {
                let (m, n) = self.dims(*a).unwrap();
                let axis = *axis;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += if axis == 0 { g[j] } else { g[i] };
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let m = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut off = 0;
                for p in parts {
                    let w = self.shape(*p)[1];
                    if let Some(gp) = self.acc(grads, *p) {
                        for i in 0..m {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(gp) = self.acc(grads, *p) {
                        for (o, &x) in gp.iter_mut().zip(&g[off..off + len]) {
                            *o += x;
                        }
                    }
                    off += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let n = self.shape(*a)[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..n {
                            ga[i * n + j] += g[r * n + j];
                        }
                    }
                }
            }
            Op::IndexAddRows(a, target) => {
                let n = self.shape(*a)[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, &t) in target.iter().enumerate() {
                        for j in 0..n {
                            ga[r * n + j] += g[t * n + j];
                        }
                    }
                }
            }
            Op::GatherFlat(a, idx) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &i) in idx.iter().enumerate() {
                        if i != PAD {
                            ga[i] += g[k];
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (o, &x) in ga.iter_mut().zip(g) {
                        *o += x;
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = self.dims(*a).unwrap();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::L2NormalizeRows(a, eps) => {
                let (m, n) = self.dims(*a).unwrap();
                let x = self.value(*a).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        let gr: Vec<f64> = g[i * n..(i + 1) * n].iter().map(|v| v.to_f64()).collect();
                        normalize_row_backward(&x[i * n..(i + 1) * n], &gr, &mut ga[i * n..(i + 1) * n], *eps);
                    }
                }
            }
            Op::CosineSimilarity(u, v, eps) => {
                let (m, d) = self.dims(*u).unwrap();
                let (p, _) = self.dims(*v).unwrap();
                let un = self.normalized(*u, *eps);
                let vn = self.normalized(*v, *eps);
                let uv = self.value(*u).data();
                let vv = self.value(*v).data();
                if self.nodes[u.0].requires_grad {
                    // dÛ = G · V̂
                    let mut du = vec![0.0f64; m * d];
                    for i in 0..m {
                        for j in 0..p {
                            let gij = g[i * p + j].to_f64();
                            if gij == 0.0 {
                                continue;
                            }
                            for (o, x) in du[i * d..(i + 1) * d].iter_mut().zip(&vn[j * d..(j + 1) * d]) {
                                *o += gij * x;
                            }
                        }
                    }
                    let gu = self.acc(grads, *u).unwrap();
                    for i in 0..m {
                        normalize_row_backward(&uv[i * d..(i + 1) * d], &du[i * d..(i + 1) * d], &mut gu[i * d..(i + 1) * d], *eps);
                    }
                }
                if self.nodes[v.0].requires_grad {
                    // dV̂ = Gᵀ · Û
                    let mut dv = vec![0.0f64; p * d];
                    for i in 0..m {
                        for j in 0..p {
                            let gij = g[i * p + j].to_f64();
                            if gij == 0.0 {
                                continue;
                            }
                            for (o, x) in dv[j * d..(j + 1) * d].iter_mut().zip(&un[i * d..(i + 1) * d]) {
                                *o += gij * x;
                            }
                        }
                    }
                    let gv = self.acc(grads, *v).unwrap();
                    for j in 0..p {
                        normalize_row_backward(&vv[j * d..(j + 1) * d], &dv[j * d..(j + 1) * d], &mut gv[j * d..(j + 1) * d], *eps);
                    }
                }
            }
            Op::LogSumExpRows(a) => {
                let (m, n) = self.dims(*a).unwrap();
                let x = self.value(*a).data();
                let y = node.value.data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..m {
                        let gi = g[i].to_f64();
                        let yi = y[i].to_f64();
                        for j in 0..n {
                            ga[i * n + j] += T::from_f64(gi * (x[i * n + j].to_f64() - yi).exp());
                        }
                    }
                }
            }
        }
    }
}

/// Gradients from one backward sweep, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

//! Reverse-mode automatic differentiation over small dense matrices.
//!
//! A [`Tape`] records every operation of one forward pass. Parameters live in
//! a [`ParamSet`] borrowed by the tape; [`Tape::backward`] accumulates their
//! gradients into a [`Grads`] buffer of matching shapes.

use serde::{Deserialize, Serialize};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Matrix { rows: 1, cols: data.len(), data }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn scalar(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Parameters and gradients
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Matrix)> {
        self.names.iter().zip(&self.tensors).enumerate().map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }

    pub fn zero_grads(&self) -> Grads {
        Grads { tensors: self.tensors.iter().map(|t| Matrix::zeros(t.rows, t.cols)).collect() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub tensors: Vec<Matrix>,
}

impl Grads {
    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.tensors[id.0]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in &mut t.data {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flat_map(|t| t.data.iter()).map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Rescales so the global L2 norm does not exceed `max_norm`; returns the
    /// norm before clipping.
    pub fn clip_norm(&mut self, max_norm: f64) -> f64 {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
        n
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    /// Per-row standardization; stores `1/σ` per row.
    Standardize(Var, Vec<f64>),
    SoftmaxRows(Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Row(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    /// Masked log-softmax of a flattened vector evaluated at one index;
    /// stores the masked probabilities.
    LogSoftmaxAt(Var, usize, Vec<f64>),
}

struct Node {
    op: Op,
    value: Option<Matrix>,
}

pub struct Tape<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamSet) -> Self {
        Tape { params, nodes: Vec::with_capacity(256), param_nodes: vec![None; params.len()] }
    }

    pub fn params(&self) -> &'p ParamSet {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(m)) => m,
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).scalar()
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node { op, value: Some(value) });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, m: Matrix) -> Var {
        self.push(Op::Input, m)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node { op: Op::Param(id), value: None });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.rows, "matmul shape {:?} x {:?}", x.shape(), y.shape());
        let mut out = Matrix::zeros(x.rows, y.cols);
        matmul_into(x, y, &mut out);
        self.push(Op::MatMul(a, b), out)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.cols, "matmul_nt shape {:?} x {:?}ᵀ", x.shape(), y.shape());
        let mut out = Matrix::zeros(x.rows, y.rows);
        for i in 0..x.rows {
            let xr = x.row(i);
            for j in 0..y.rows {
                out.data[i * y.rows + j] = dot(xr, y.row(j));
            }
        }
        self.push(Op::MatMulNT(a, b), out)
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        let data = x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect();
        let out = Matrix::from_vec(x.rows, x.cols, data);
        self.push(op, out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert!(r.rows == 1 && r.cols == x.cols, "row broadcast {:?} with {:?}", x.shape(), r.shape());
        let mut out = x.clone();
        for i in 0..x.rows {
            for (o, &b) in out.data[i * x.cols..(i + 1) * x.cols].iter_mut().zip(&r.data) {
                *o = f(*o, b);
            }
        }
        self.push(op, out)
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, Op::AddRow(a, row), |p, q| p + q)
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, Op::MulRow(a, row), |p, q| p * q)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let x = self.value(a);
        let out = Matrix::from_vec(x.rows, x.cols, x.data.iter().map(|&v| f(v)).collect());
        self.push(op, out)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |v| v * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |v| v.max(0.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    /// `(x - mean) / sqrt(var + 1e-5)` per row.
    pub fn standardize(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let c = x.cols as f64;
        let mut out = x.clone();
        let mut inv = Vec::with_capacity(x.rows);
        for i in 0..x.rows {
            let r = &mut out.data[i * x.cols..(i + 1) * x.cols];
            let mean = r.iter().sum::<f64>() / c;
            let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c;
            let is = 1.0 / (var + 1e-5).sqrt();
            for v in r.iter_mut() {
                *v = (*v - mean) * is;
            }
            inv.push(is);
        }
        self.push(Op::Standardize(a, inv), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = x.clone();
        for i in 0..x.rows {
            softmax_in_place(&mut out.data[i * x.cols..(i + 1) * x.cols]);
        }
        self.push(Op::SoftmaxRows(a), out)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::zeros(1, x.cols);
        for i in 0..x.rows {
            for (o, &v) in out.data.iter_mut().zip(x.row(i)) {
                *o += v;
            }
        }
        let inv = 1.0 / x.rows as f64;
        out.data.iter_mut().for_each(|v| *v *= inv);
        self.push(Op::MeanRows(a), out)
    }

    pub fn max_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut out = Matrix::from_vec(1, x.cols, x.row(0).to_vec());
        let mut arg = vec![0; x.cols];
        for i in 1..x.rows {
            for (j, &v) in x.row(i).iter().enumerate() {
                if v > out.data[j] {
                    out.data[j] = v;
                    arg[j] = i;
                }
            }
        }
        self.push(Op::MaxRows(a, arg), out)
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let x = self.value(a);
        let out = Matrix::from_vec(1, x.cols, x.row(r).to_vec());
        self.push(Op::Row(a, r), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols);
        let mut out = Matrix::zeros(x.rows, len);
        for i in 0..x.rows {
            out.data[i * len..(i + 1) * len].copy_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(Op::SliceCols(a, start), out)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.data[i * cols + off..i * cols + off + x.cols].copy_from_slice(x.row(i));
            }
            off += x.cols;
        }
        self.push(Op::ConcatCols(parts.to_vec()), out)
    }

    /// Log-probability of entry `index` under a softmax restricted to the
    /// entries where `mask` is true. Returns a `1×1` value.
    pub fn log_softmax_at(&mut self, a: Var, mask: &[bool], index: usize) -> Var {
        let probs = masked_softmax(&self.value(a).data, mask);
        assert!(mask[index], "log_softmax_at on a masked entry");
        let x = &self.value(a).data;
        let m = x.iter().zip(mask).filter(|(_, &k)| k).map(|(&v, _)| v).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + x.iter().zip(mask).filter(|(_, &k)| k).map(|(&v, _)| (v - m).exp()).sum::<f64>().ln();
        let out = Matrix::from_vec(1, 1, vec![x[index] - lse]);
        self.push(Op::LogSoftmaxAt(a, index, probs), out)
    }

    /// Backpropagates `seed · ∂out/∂θ` into `grads`.
    pub fn backward(&self, out: Var, seed: f64, grads: &mut Grads) {
        self.backward_many(&[(out, seed)], grads);
    }

    /// Backpropagates several weighted outputs at once.
    pub fn backward_many(&self, outputs: &[(Var, f64)], grads: &mut Grads) {
        let mut adj: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for &(v, s) in outputs {
            let x = self.value(v);
            let g = adj[v.0].get_or_insert_with(|| Matrix::zeros(x.rows, x.cols));
            g.data.iter_mut().for_each(|e| *e += s);
            last = last.max(v.0);
        }
        for idx in (0..=last).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let t = &mut grads.tensors[id.0];
                    for (a, b) in t.data.iter_mut().zip(&g.data) {
                        *a += b;
                    }
                }
                Op::MatMul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    // dA = G Bᵀ, dB = Aᵀ G
                    let da = acc(&mut adj, *a, x.rows, x.cols);
                    for i in 0..x.rows {
                        let gr = &g.data[i * g.cols..(i + 1) * g.cols];
                        for k in 0..x.cols {
                            da.data[i * x.cols + k] += dot(gr, y.row(k));
                        }
                    }
                    let db = acc(&mut adj, *b, y.rows, y.cols);
                    for i in 0..x.rows {
                        let gr = &g.data[i * g.cols..(i + 1) * g.cols];
                        for k in 0..x.cols {
                            let xv = x.data[i * x.cols + k];
                            if xv != 0.0 {
                                axpy(xv, gr, &mut db.data[k * y.cols..(k + 1) * y.cols]);
                            }
                        }
                    }
                }
                Op::MatMulNT(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    // out = A Bᵀ: dA = G B, dB = Gᵀ A
                    let da = acc(&mut adj, *a, x.rows, x.cols);
                    for i in 0..x.rows {
                        for j in 0..y.rows {
                            let gv = g.data[i * y.rows + j];
                            if gv != 0.0 {
                                axpy(gv, y.row(j), &mut da.data[i * x.cols..(i + 1) * x.cols]);
                            }
                        }
                    }
                    let db = acc(&mut adj, *b, y.rows, y.cols);
                    for i in 0..x.rows {
                        for j in 0..y.rows {
                            let gv = g.data[i * y.rows + j];
                            if gv != 0.0 {
                                axpy(gv, x.row(i), &mut db.data[j * y.cols..(j + 1) * y.cols]);
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(acc_like(&mut adj, *a, &g), &g.data, 1.0);
                    add_into(acc_like(&mut adj, *b, &g), &g.data, 1.0);
                }
                Op::Sub(a, b) => {
                    add_into(acc_like(&mut adj, *a, &g), &g.data, 1.0);
                    add_into(acc_like(&mut adj, *b, &g), &g.data, -1.0);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (self.value(*a), self.value(*b));
                    let da = acc_like(&mut adj, *a, &g);
                    for ((d, &gv), &yv) in da.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *d += gv * yv;
                    }
                    let db = acc_like(&mut adj, *b, &g);
                    for ((d, &gv), &xv) in db.data.iter_mut().zip(&g.data).zip(&x.data) {
                        *d += gv * xv;
                    }
                }
                Op::AddRow(a, r) => {
                    add_into(acc_like(&mut adj, *a, &g), &g.data, 1.0);
                    let dr = acc(&mut adj, *r, 1, g.cols);
                    for i in 0..g.rows {
                        add_slice(&mut dr.data, &g.data[i * g.cols..(i + 1) * g.cols]);
                    }
                }
                Op::MulRow(a, r) => {
                    let (x, rv) = (self.value(*a), self.value(*r));
                    let da = acc_like(&mut adj, *a, &g);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            da.data[i * g.cols + j] += g.data[i * g.cols + j] * rv.data[j];
                        }
                    }
                    let dr = acc(&mut adj, *r, 1, g.cols);
                    for i in 0..g.rows {
                        for j in 0..g.cols {
                            dr.data[j] += g.data[i * g.cols + j] * x.data[i * g.cols + j];
                        }
                    }
                }
                Op::Scale(a, s) => add_into(acc_like(&mut adj, *a, &g), &g.data, *s),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let da = acc_like(&mut adj, *a, &g);
                    for ((d, &gv), &xv) in da.data.iter_mut().zip(&g.data).zip(&x.data) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().unwrap();
                    let da = acc_like(&mut adj, *a, &g);
                    for ((d, &gv), &yv) in da.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *d += gv * (1.0 - yv * yv);
                    }
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().unwrap();
                    let da = acc_like(&mut adj, *a, &g);
                    for ((d, &gv), &yv) in da.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *d += gv * yv * (1.0 - yv);
                    }
                }
                Op::Standardize(a, inv) => {
                    let y = node.value.as_ref().unwrap();
                    let c = g.cols;
                    let da = acc_like(&mut adj, *a, &g);
                    for i in 0..g.rows {
                        let gr = &g.data[i * c..(i + 1) * c];
                        let yr = &y.data[i * c..(i + 1) * c];
                        let gm = gr.iter().sum::<f64>() / c as f64;
                        let gy = dot(gr, yr) / c as f64;
                        for j in 0..c {
                            da.data[i * c + j] += inv[i] * (gr[j] - gm - yr[j] * gy);
                        }
                    }
                }
                Op::SoftmaxRows(a) => {
                    let y = node.value.as_ref().unwrap();
                    let c = g.cols;
                    let da = acc_like(&mut adj, *a, &g);
                    for i in 0..g.rows {
                        let gr = &g.data[i * c..(i + 1) * c];
                        let yr = &y.data[i * c..(i + 1) * c];
                        let s = dot(gr, yr);
                        for j in 0..c {
                            da.data[i * c + j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let inv = 1.0 / x.rows as f64;
                    let da = acc(&mut adj, *a, x.rows, x.cols);
                    for i in 0..x.rows {
                        axpy(inv, &g.data, &mut da.data[i * x.cols..(i + 1) * x.cols]);
                    }
                }
                Op::MaxRows(a, arg) => {
                    let x = self.value(*a);
                    let da = acc(&mut adj, *a, x.rows, x.cols);
                    for (j, &r) in arg.iter().enumerate() {
                        da.data[r * x.cols + j] += g.data[j];
                    }
                }
                Op::Row(a, r) => {
                    let x = self.value(*a);
                    let da = acc(&mut adj, *a, x.rows, x.cols);
                    add_slice(&mut da.data[r * x.cols..(r + 1) * x.cols], &g.data);
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let da = acc(&mut adj, *a, x.rows, x.cols);
                    for i in 0..x.rows {
                        add_slice(
                            &mut da.data[i * x.cols + start..i * x.cols + start + g.cols],
                            &g.data[i * g.cols..(i + 1) * g.cols],
                        );
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let x = self.value(p);
                        let (r, c) = x.shape();
                        let dp = acc(&mut adj, p, r, c);
                        for i in 0..r {
                            add_slice(&mut dp.data[i * c..(i + 1) * c], &g.data[i * g.cols + off..i * g.cols + off + c]);
                        }
                        off += c;
                    }
                }
                Op::LogSoftmaxAt(a, index, probs) => {
                    let x = self.value(*a);
                    let gv = g.data[0];
                    let da = acc(&mut adj, *a, x.rows, x.cols);
                    for (d, &p) in da.data.iter_mut().zip(probs) {
                        *d -= gv * p;
                    }
                    da.data[*index] += gv;
                }
            }
        }
    }
}

fn acc(adj: &mut [Option<Matrix>], v: Var, rows: usize, cols: usize) -> &mut Matrix {
    adj[v.0].get_or_insert_with(|| Matrix::zeros(rows, cols))
}

fn acc_like<'a>(adj: &'a mut [Option<Matrix>], v: Var, like: &Matrix) -> &'a mut Matrix {
    acc(adj, v, like.rows, like.cols)
}

fn add_into(dst: &mut Matrix, src: &[f64], s: f64) {
    axpy(s, src, &mut dst.data);
}

#[inline]
fn add_slice(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[inline]
fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn matmul_into(x: &Matrix, y: &Matrix, out: &mut Matrix) {
    for i in 0..x.rows {
        let orow = &mut out.data[i * y.cols..(i + 1) * y.cols];
        for k in 0..x.cols {
            axpy(x.data[i * x.cols + k], &y.data[k * y.cols..(k + 1) * y.cols], orow);
        }
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

fn softmax_in_place(r: &mut [f64]) {
    let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in r.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in r.iter_mut() {
        *v /= s;
    }
}

/// Softmax over the unmasked entries; masked entries get probability 0.
pub fn masked_softmax(x: &[f64], mask: &[bool]) -> Vec<f64> {
    assert_eq!(x.len(), mask.len());
    let m = x.iter().zip(mask).filter(|(_, &k)| k).map(|(&v, _)| v).fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = x.iter().zip(mask).map(|(&v, &k)| if k { (v - m).exp() } else { 0.0 }).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

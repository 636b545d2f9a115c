//! Tape-based reverse-mode differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation applied to its nodes; calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! accumulates adjoints. Graphs are cheap, single-use and built per batch.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length");
        Matrix { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Matrix::from_vec(rows.len(), cols, data)
    }

    pub fn scalar(x: f64) -> Self {
        Matrix::from_vec(1, 1, vec![x])
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar");
        self.data[0]
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn add_assign(&mut self, other: &Matrix) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

/// `a · b`
fn matmul(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.rows, "matmul {:?} x {:?}", a.shape(), b.shape());
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &av) in a.row(i).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(b.row(k)) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a · bᵀ`
fn matmul_bt(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols, b.cols, "matmul_bt {:?} x {:?}ᵀ", a.shape(), b.shape());
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            out.data[i * b.rows + j] = ar.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · b`
fn matmul_at(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.rows, b.rows, "matmul_at {:?}ᵀ x {:?}", a.shape(), b.shape());
    let mut out = Matrix::zeros(a.cols, b.cols);
    for k in 0..a.rows {
        let br = b.row(k);
        for (i, &av) in a.row(k).iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &bv) in orow.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-[t ln σ(z) + (1-t) ln(1-σ(z))]` in a form that stays finite for large |z|.
pub fn bce_with_logits(z: f64, t: f64) -> f64 {
    z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Relu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    MeanRows(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Row(Var, usize),
    BceWithLogits(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `shape` when `v` did not influence the output.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Matrix {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_bt(self.value(a), self.value(b));
        self.push(v, Op::MatMulBT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "add shapes");
        let mut v = x.clone();
        v.add_assign(y);
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1 × cols` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (x, row) = (self.value(a), self.value(r));
        assert_eq!((1, x.cols), row.shape(), "add_row shapes");
        let mut v = x.clone();
        for chunk in v.data.chunks_mut(x.cols) {
            for (o, b) in chunk.iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        self.push(v, Op::AddRow(a, r))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "mul shapes");
        let data = x.data.iter().zip(&y.data).map(|(p, q)| p * q).collect();
        let v = Matrix::from_vec(x.rows, x.cols, data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for row in v.data.chunks_mut(x.cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            row.iter_mut().for_each(|e| *e /= sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Column means, giving a `1 × cols` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = Matrix::zeros(1, x.cols);
        for row in x.data.chunks(x.cols) {
            for (o, e) in v.data.iter_mut().zip(row) {
                *o += e;
            }
        }
        let n = x.rows as f64;
        v.data.iter_mut().for_each(|o| *o /= n);
        self.push(v, Op::MeanRows(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let v = Matrix::scalar(x.data.iter().sum::<f64>() / x.data.len() as f64);
        self.push(v, Op::Mean(a))
    }

    /// Rows `ids` of `table`, in order.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * t.cols);
        for &i in ids {
            data.extend_from_slice(t.row(i));
        }
        let v = Matrix::from_vec(ids.len(), t.cols, data);
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols out of range");
        let mut data = Vec::with_capacity(x.rows * len);
        for r in 0..x.rows {
            data.extend_from_slice(&x.row(r)[start..start + len]);
        }
        let v = Matrix::from_vec(x.rows, len, data);
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut v = Matrix::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows, rows, "concat_cols rows");
            for r in 0..rows {
                v.data[r * cols + off..r * cols + off + x.cols].copy_from_slice(x.row(r));
            }
            off += x.cols;
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols, cols, "concat_rows cols");
            data.extend_from_slice(&x.data);
        }
        let v = Matrix::from_vec(data.len() / cols.max(1), cols, data);
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn row(&mut self, a: Var, r: usize) -> Var {
        let x = self.value(a);
        let v = Matrix::from_vec(1, x.cols, x.row(r).to_vec());
        self.push(v, Op::Row(a, r))
    }

    /// Mean binary cross-entropy of logits `z` against soft targets, as a 1×1 node.
    pub fn bce_with_logits(&mut self, z: Var, targets: &[f64]) -> Var {
        let x = self.value(z);
        assert_eq!(x.data.len(), targets.len(), "bce targets length");
        let total: f64 = x
            .data
            .iter()
            .zip(targets)
            .map(|(&z, &t)| bce_with_logits(z, t))
            .sum();
        let v = Matrix::scalar(total / targets.len() as f64);
        self.push(v, Op::BceWithLogits(z, targets.to_vec()))
    }

    /// Reverse sweep from the scalar node `out`.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.value(out).shape(), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Matrix::scalar(1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, matmul_bt(&g, bv));
                    acc(&mut grads, *b, matmul_at(av, &g));
                }
                Op::MatMulBT(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, matmul(&g, bv));
                    acc(&mut grads, *b, matmul_at(&g, av));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddRow(a, r) => {
                    let mut gr = Matrix::zeros(1, g.cols);
                    for row in g.data.chunks(g.cols) {
                        for (o, e) in gr.data.iter_mut().zip(row) {
                            *o += e;
                        }
                    }
                    acc(&mut grads, *a, g);
                    acc(&mut grads, *r, gr);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let ga = g.data.iter().zip(&bv.data).map(|(x, y)| x * y).collect();
                    let gb = g.data.iter().zip(&av.data).map(|(x, y)| x * y).collect();
                    acc(&mut grads, *a, Matrix::from_vec(g.rows, g.cols, ga));
                    acc(&mut grads, *b, Matrix::from_vec(g.rows, g.cols, gb));
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|x| x * s)),
                Op::AddScalar(a) => acc(&mut grads, *a, g),
                Op::Tanh(a) => {
                    let d = g.data.iter().zip(&y.data).map(|(g, y)| g * (1.0 - y * y)).collect();
                    acc(&mut grads, *a, Matrix::from_vec(g.rows, g.cols, d));
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    let d = g
                        .data
                        .iter()
                        .zip(&x.data)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect();
                    acc(&mut grads, *a, Matrix::from_vec(g.rows, g.cols, d));
                }
                Op::Sigmoid(a) => {
                    let d = g.data.iter().zip(&y.data).map(|(g, y)| g * y * (1.0 - y)).collect();
                    acc(&mut grads, *a, Matrix::from_vec(g.rows, g.cols, d));
                }
                Op::SoftmaxRows(a) => {
                    let mut d = Matrix::zeros(g.rows, g.cols);
                    for r in 0..g.rows {
                        let (gr, yr) = (g.row(r), y.row(r));
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for c in 0..g.cols {
                            d.data[r * g.cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::MeanRows(a) => {
                    let x = self.value(*a);
                    let n = x.rows as f64;
                    let mut d = Matrix::zeros(x.rows, x.cols);
                    for row in d.data.chunks_mut(x.cols) {
                        for (o, e) in row.iter_mut().zip(&g.data) {
                            *o = e / n;
                        }
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Mean(a) => {
                    let x = self.value(*a);
                    let each = g.item() / x.data.len() as f64;
                    acc(&mut grads, *a, Matrix::from_vec(x.rows, x.cols, vec![each; x.data.len()]));
                }
                Op::Gather(t, ids) => {
                    let tv = self.value(*t);
                    let mut d = Matrix::zeros(tv.rows, tv.cols);
                    for (r, &i) in ids.iter().enumerate() {
                        for (o, e) in d.data[i * tv.cols..(i + 1) * tv.cols].iter_mut().zip(g.row(r)) {
                            *o += e;
                        }
                    }
                    acc(&mut grads, *t, d);
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut d = Matrix::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        d.data[r * x.cols + start..r * x.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *a, d);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut d = Matrix::zeros(g.rows, w);
                        for r in 0..g.rows {
                            d.data[r * w..(r + 1) * w].copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        acc(&mut grads, p, d);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let x = self.value(p);
                        let n = x.data.len();
                        let d = Matrix::from_vec(x.rows, x.cols, g.data[off..off + n].to_vec());
                        acc(&mut grads, p, d);
                        off += n;
                    }
                }
                Op::Row(a, r) => {
                    let x = self.value(*a);
                    let mut d = Matrix::zeros(x.rows, x.cols);
                    d.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(&g.data);
                    acc(&mut grads, *a, d);
                }
                Op::BceWithLogits(z, targets) => {
                    let zv = self.value(*z);
                    let scale = g.item() / targets.len() as f64;
                    let d = zv
                        .data
                        .iter()
                        .zip(targets)
                        .map(|(&z, &t)| (sigmoid(z) - t) * scale)
                        .collect();
                    acc(&mut grads, *z, Matrix::from_vec(zv.rows, zv.cols, d));
                }
            }
        }
        Gradients { grads }
    }
}

/// Named parameter tensors of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub names: Vec<String>,
    pub tensors: Vec<Matrix>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: &str, m: Matrix) -> usize {
        self.names.push(name.to_string());
        self.tensors.push(m);
        self.tensors.len() - 1
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Places every tensor on `g` as a leaf, in order.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.leaf(t.clone())).collect()
    }

    pub fn grads(&self, vars: &[Var], grads: &Gradients) -> Vec<Matrix> {
        vars.iter()
            .zip(&self.tensors)
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect()
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().map(Matrix::norm_sq).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Matrix::is_finite)
    }
}

impl Default for ParamSet {
    fn default() -> Self {
        ParamSet::new()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        let zeros = || params.tensors.iter().map(|t| Matrix::zeros(t.rows, t.cols)).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Matrix]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = &mut params.tensors[i];
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                p.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central differences of `f` at `x`, one entry at a time.
    fn numeric_grad(x: &Matrix, f: impl Fn(&Matrix) -> f64) -> Matrix {
        let eps = 1e-5;
        let mut out = Matrix::zeros(x.rows, x.cols);
        for i in 0..x.data.len() {
            let mut p = x.clone();
            p.data[i] += eps;
            let mut m = x.clone();
            m.data[i] -= eps;
            out.data[i] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        out
    }

    fn assert_close(a: &Matrix, b: &Matrix, tol: f64) {
        for (x, y) in a.data.iter().zip(&b.data) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < tol, "{x} vs {y}");
        }
    }

    fn m(rows: usize, cols: usize, seed: u64) -> Matrix {
        use rand::Rng;
        let mut rng = crate::rng::seeded(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Builds `f(a, b) -> scalar` on a fresh graph, compares reverse-mode
    /// gradients for both inputs against finite differences.
    fn check2(a: Matrix, b: Matrix, build: impl Fn(&mut Graph, Var, Var) -> Var) {
        let eval = |a: &Matrix, b: &Matrix| {
            let mut g = Graph::new();
            let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
            let out = build(&mut g, va, vb);
            g.value(out).item()
        };
        let mut g = Graph::new();
        let (va, vb) = (g.leaf(a.clone()), g.leaf(b.clone()));
        let out = build(&mut g, va, vb);
        let grads = g.backward(out);
        let ga = grads.get_or_zeros(va, a.shape());
        let gb = grads.get_or_zeros(vb, b.shape());
        assert_close(&ga, &numeric_grad(&a, |x| eval(x, &b)), 1e-6);
        assert_close(&gb, &numeric_grad(&b, |x| eval(&a, x)), 1e-6);
    }

    #[test]
    fn matmul_and_transposes() {
        check2(m(3, 4, 1), m(4, 2, 2), |g, a, b| {
            let p = g.matmul(a, b);
            let t = g.tanh(p);
            g.mean(t)
        });
        check2(m(3, 4, 3), m(5, 4, 4), |g, a, b| {
            let p = g.matmul_bt(a, b);
            let s = g.sigmoid(p);
            g.mean(s)
        });
    }

    #[test]
    fn elementwise_and_broadcast() {
        check2(m(3, 4, 5), m(3, 4, 6), |g, a, b| {
            let p = g.mul(a, b);
            let q = g.add(p, a);
            let r = g.scale(q, -0.7);
            let s = g.add_scalar(r, 1.0);
            let t = g.tanh(s);
            g.mean(t)
        });
        check2(m(3, 4, 7), m(1, 4, 8), |g, a, b| {
            let p = g.add_row(a, b);
            let q = g.mul(p, p);
            g.mean(q)
        });
    }

    #[test]
    fn softmax_pooling_and_reshapes() {
        check2(m(3, 5, 9), m(5, 5, 10), |g, a, b| {
            let p = g.matmul(a, b);
            let s = g.softmax_rows(p);
            let w = g.mul(s, s);
            let left = g.slice_cols(w, 1, 3);
            let right = g.slice_cols(p, 0, 2);
            let c = g.concat_cols(&[left, right]);
            let r0 = g.row(c, 2);
            let rr = g.concat_rows(&[c, r0]);
            let mr = g.mean_rows(rr);
            let t = g.tanh(mr);
            g.mean(t)
        });
    }

    #[test]
    fn gather_accumulates_repeated_rows() {
        let table = m(5, 3, 11);
        let mut g = Graph::new();
        let t = g.leaf(table.clone());
        let e = g.gather(t, &[1, 3, 1]);
        let s = g.mean(e);
        let grads = g.backward(s);
        let gt = grads.get(t).unwrap();
        assert_eq!(gt.row(0), &[0.0; 3]);
        assert!((gt.get(1, 0) - 2.0 / 9.0).abs() < 1e-15);
        assert!((gt.get(3, 2) - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        check2(Matrix::from_vec(1, 4, vec![-1.0, 0.5, 0.25, 2.0]), m(1, 4, 12), |g, a, b| {
            let p = g.relu(a);
            let q = g.mul(p, b);
            g.mean(q)
        });
    }

    #[test]
    fn bce_node_matches_finite_differences() {
        let targets = [1.0, 0.0, 0.3, 0.6, 0.9, 1.0];
        check2(m(2, 3, 13), m(2, 3, 14), |g, a, b| {
            let z = g.add(a, b);
            g.bce_with_logits(z, &targets)
        });
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamSet::new();
        p.push("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let mut opt = Adam::new(0.1, &p);
        opt.step(&mut p, &[Matrix::from_vec(1, 2, vec![3.0, -0.5])]);
        // With bias correction the first update is lr * sign(g).
        assert!((p.tensors[0].data[0] - 0.9).abs() < 1e-6);
        assert!((p.tensors[0].data[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn stable_bce_stays_finite() {
        for z in [-100.0, -30.0, 0.0, 30.0, 100.0] {
            for t in [0.0, 0.5, 1.0] {
                assert!(bce_with_logits(z, t).is_finite());
            }
        }
        assert!((bce_with_logits(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }
}

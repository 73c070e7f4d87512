//! Dense row-major matrices and a small reverse-mode autodiff tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! borrowed leaves, so building a graph never copies weights.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length");
        Self { rows, cols, data }
    }

    pub fn column(values: Vec<f64>) -> Self {
        let n = values.len();
        Self::from_vec(n, 1, values)
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn scalar(&self) -> f64 {
        assert_eq!(self.shape(), (1, 1), "not a scalar");
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (p, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(other.row(p)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_bt(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_bt shape");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = a.iter().zip(other.row(j)).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn matmul_at(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_at shape");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for p in 0..self.rows {
            let b = other.row(p);
            for (i, &a) in self.row(p).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &bv) in out_row.iter_mut().zip(b) {
                    *o += a * bv;
                }
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &Matrix) {
        assert_eq!(self.shape(), other.shape(), "add shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        assert_eq!(self.shape(), other.shape(), "zip shape");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    fn column_sums(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for i in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(i)) {
                *o += v;
            }
        }
        out
    }

    fn slice_cols(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.cols, "column slice out of range");
        let mut data = Vec::with_capacity(self.rows * len);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[start..start + len]);
        }
        Matrix::from_vec(self.rows, len, data)
    }

    fn slice_rows(&self, start: usize, len: usize) -> Matrix {
        assert!(start + len <= self.rows, "row slice out of range");
        Matrix::from_vec(
            len,
            self.cols,
            self.data[start * self.cols..(start + len) * self.cols].to_vec(),
        )
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }
}

pub const LOGIT_CLAMP: f64 = 30.0;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    Normalize {
        input: Var,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Dropout {
        input: Var,
        mask: Vec<f64>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Pick {
        input: Var,
        row: usize,
        col: usize,
    },
    WeightedBce {
        logits: Var,
        targets: Vec<f64>,
        weight: f64,
    },
    CrossEntropy {
        logits: Var,
        target: usize,
    },
}

enum Value<'p> {
    Owned(Matrix),
    Borrowed(&'p Matrix),
}

struct Node<'p> {
    value: Value<'p>,
    op: Op,
}

/// Gradients of a scalar root with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Matrix> {
        self.grads[var.0].take()
    }
}

#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Matrix {
        match &self.nodes[var.0].value {
            Value::Owned(m) => m,
            Value::Borrowed(m) => m,
        }
    }

    /// A borrowed leaf (typically a parameter).
    pub fn param(&mut self, value: &'p Matrix) -> Var {
        self.nodes.push(Node {
            value: Value::Borrowed(value),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(ids.len(), t.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "add_row expects a row vector");
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1×c` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let r = self.value(row);
        assert_eq!(r.rows(), 1, "mul_row expects a row vector");
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            for (x, y) in v.row_mut(i).iter_mut().zip(r.row(0)) {
                *x *= y;
            }
        }
        self.push(v, Op::MulRow(a, row))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b));
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for i in 0..v.rows() {
            softmax_in_place(v.row_mut(i));
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Per-row standardization `(x − mean) / sqrt(var + eps)`.
    pub fn normalize_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut v = self.value(a).clone();
        let cols = v.cols() as f64;
        let mut inv_std = Vec::with_capacity(v.rows());
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let mean = row.iter().sum::<f64>() / cols;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * inv);
            inv_std.push(inv);
        }
        self.push(v, Op::Normalize { input: a, inv_std })
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Multiplies by a fixed mask (already scaled by `1/(1-p)`).
    pub fn dropout(&mut self, a: Var, mask: Vec<f64>) -> Var {
        let input = self.value(a);
        assert_eq!(mask.len(), input.data().len(), "dropout mask length");
        let data = input.data().iter().zip(&mask).map(|(x, m)| x * m).collect();
        let v = Matrix::from_vec(input.rows(), input.cols(), data);
        self.push(v, Op::Dropout { input: a, mask })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_cols(start, len);
        self.push(v, Op::SliceCols { input: a, start })
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        self.push(v, Op::SliceRows { input: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let src = self.value(p).row(i);
                out.row_mut(i)[offset..offset + src.len()].copy_from_slice(src);
                offset += src.len();
            }
        }
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Single entry as a `1×1` node.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Var {
        let v = Matrix::filled(1, 1, self.value(a)[(row, col)]);
        self.push(v, Op::Pick { input: a, row, col })
    }

    /// Mean over the entries of `logits` of the weighted binary cross-entropy
    /// `−[w·y·log σ(z) + (1−y)·log(1−σ(z))]`, with `z` clamped to ±30.
    /// An empty input gives 0.
    pub fn weighted_bce(&mut self, logits: Var, targets: &[f64], weight: f64) -> Var {
        let z = self.value(logits);
        assert_eq!(z.data().len(), targets.len(), "bce target length");
        let n = targets.len();
        let total: f64 = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| {
                let z = z.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
                weight * y * softplus(-z) + (1.0 - y) * softplus(z)
            })
            .sum();
        let value = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(
            Matrix::filled(1, 1, value),
            Op::WeightedBce {
                logits,
                targets: targets.to_vec(),
                weight,
            },
        )
    }

    /// Softmax cross-entropy of a `1×C` logit row against `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Var {
        let z = self.value(logits).row(0);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let value = lse - z[target];
        self.push(Matrix::filled(1, 1, value), Op::CrossEntropy { logits, target })
    }

    /// Reverse pass from a `1×1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).shape(), (1, 1), "backward root must be scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::filled(1, 1, 1.0));

        fn acc(grads: &mut [Option<Matrix>], var: Var, g: Matrix) {
            match &mut grads[var.0] {
                Some(existing) => existing.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let out = self.value(Var(i));
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Gather { table, ids } => {
                    let t = self.value(*table);
                    let mut dt = Matrix::zeros(t.rows(), t.cols());
                    for (r, &id) in ids.iter().enumerate() {
                        for (d, v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.column_sums());
                    acc(&mut grads, *a, g.clone());
                }
                Op::MulRow(a, row) => {
                    let av = self.value(*a);
                    let r = self.value(*row);
                    let mut da = g.clone();
                    for k in 0..da.rows() {
                        for (x, y) in da.row_mut(k).iter_mut().zip(r.row(0)) {
                            *x *= y;
                        }
                    }
                    acc(&mut grads, *row, g.zip_map(av, |x, y| x * y).column_sums());
                    acc(&mut grads, *a, da);
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_bt(self.value(*b));
                    let db = self.value(*a).matmul_at(&g);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = g.matmul(self.value(*b));
                    let db = g.matmul_at(self.value(*a));
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g.map(|x| x * s)),
                Op::SoftmaxRows(a) => {
                    let mut da = Matrix::zeros(out.rows(), out.cols());
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let dy = g.row(r);
                        let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
                        for ((d, &yv), &dyv) in da.row_mut(r).iter_mut().zip(y).zip(dy) {
                            *d = yv * (dyv - dot);
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::Normalize { input, inv_std } => {
                    let cols = out.cols() as f64;
                    let mut da = Matrix::zeros(out.rows(), out.cols());
                    for (r, &scale) in inv_std.iter().enumerate() {
                        let y = out.row(r);
                        let dy = g.row(r);
                        let mean_dy = dy.iter().sum::<f64>() / cols;
                        let mean_dyy = dy.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / cols;
                        for ((d, &yv), &dyv) in da.row_mut(r).iter_mut().zip(y).zip(dy) {
                            *d = scale * (dyv - mean_dy - yv * mean_dyy);
                        }
                    }
                    acc(&mut grads, *input, da);
                }
                Op::Gelu(a) => {
                    let da = g.zip_map(self.value(*a), |d, x| d * gelu_grad(x));
                    acc(&mut grads, *a, da);
                }
                Op::Dropout { input, mask } => {
                    let data = g.data().iter().zip(mask).map(|(d, m)| d * m).collect();
                    acc(&mut grads, *input, Matrix::from_vec(g.rows(), g.cols(), data));
                }
                Op::SliceCols { input, start } => {
                    let src = self.value(*input);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *input, da);
                }
                Op::SliceRows { input, start } => {
                    let src = self.value(*input);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        da.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *input, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        acc(&mut grads, p, g.slice_cols(offset, cols));
                        offset += cols;
                    }
                }
                Op::Pick { input, row, col } => {
                    let src = self.value(*input);
                    let mut da = Matrix::zeros(src.rows(), src.cols());
                    da[(*row, *col)] = g.scalar();
                    acc(&mut grads, *input, da);
                }
                Op::WeightedBce {
                    logits,
                    targets,
                    weight,
                } => {
                    let z = self.value(*logits);
                    let n = targets.len().max(1) as f64;
                    let upstream = g.scalar();
                    let data = z
                        .data()
                        .iter()
                        .zip(targets)
                        .map(|(&z, &y)| {
                            if z.abs() >= LOGIT_CLAMP {
                                return 0.0;
                            }
                            upstream * (sigmoid(z) * (weight * y + 1.0 - y) - weight * y) / n
                        })
                        .collect();
                    acc(&mut grads, *logits, Matrix::from_vec(z.rows(), z.cols(), data));
                }
                Op::CrossEntropy { logits, target } => {
                    let mut p = self.value(*logits).clone();
                    softmax_in_place(p.row_mut(0));
                    p[(0, *target)] -= 1.0;
                    let upstream = g.scalar();
                    acc(&mut grads, *logits, p.map(|x| x * upstream));
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
    }

    /// Central-difference check of d(root)/d(leaf) for every leaf entry.
    fn check<F>(leaves: Vec<Matrix>, build: F)
    where
        F: Fn(&mut Graph<'_>, &[Var]) -> Var,
    {
        let eval = |ls: &[Matrix]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ls.iter().map(|m| g.param(m)).collect();
            let root = build(&mut g, &vars);
            g.value(root).scalar()
        };
        let mut g = Graph::new();
        let vars: Vec<Var> = leaves.iter().map(|m| g.param(m)).collect();
        let root = build(&mut g, &vars);
        let grads = g.backward(root);
        let eps = 1e-5;
        for (k, leaf) in leaves.iter().enumerate() {
            let analytic = grads
                .get(vars[k])
                .cloned()
                .unwrap_or(Matrix::zeros(leaf.rows(), leaf.cols()));
            for idx in 0..leaf.data().len() {
                let mut plus = leaves.clone();
                plus[k].data_mut()[idx] += eps;
                let mut minus = leaves.clone();
                minus[k].data_mut()[idx] -= eps;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
                let a = analytic.data()[idx];
                let err = (a - numeric).abs() / (1e-6 + a.abs().max(numeric.abs()));
                assert!(
                    err < 1e-5 || (a - numeric).abs() < 1e-8,
                    "leaf {k}[{idx}]: {a} vs {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 5, 4);
        let bt = Matrix::from_vec(4, 5, (0..20).map(|k| b[(k % 5, k / 5)]).collect());
        let direct = a.matmul(&bt);
        let via_bt = a.matmul_bt(&b);
        for (x, y) in direct.data().iter().zip(via_bt.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = Matrix::from_vec(4, 3, (0..12).map(|k| a[(k % 3, k / 3)]).collect());
        let via_at = at.matmul_at(&bt);
        for (x, y) in direct.data().iter().zip(via_at.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_of_attention_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let leaves = vec![
            random(&mut rng, 4, 6),
            random(&mut rng, 6, 6),
            random(&mut rng, 1, 6),
            random(&mut rng, 1, 6),
        ];
        check(leaves, |g, v| {
            let q = g.matmul(v[0], v[1]);
            let q = g.add_row(q, v[2]);
            let k = g.slice_cols(q, 0, 3);
            let s = g.matmul_bt(k, k);
            let s = g.scale(s, 0.5);
            let a = g.softmax_rows(s);
            let vv = g.slice_cols(q, 3, 3);
            let ctx = g.matmul(a, vv);
            let cat = g.concat_cols(&[ctx, k]);
            let cat = g.add(cat, q);
            let n = g.normalize_rows(cat, 1e-5);
            let n = g.mul_row(n, v[3]);
            let h = g.gelu(n);
            let h = g.dropout(h, (0..24).map(|i| if i % 3 == 0 { 0.0 } else { 1.5 }).collect());
            let logits = g.slice_rows(h, 1, 1);
            g.cross_entropy(logits, 2)
        });
    }

    #[test]
    fn gradient_of_bce_and_gather() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let leaves = vec![random(&mut rng, 5, 3), random(&mut rng, 3, 1)];
        check(leaves, |g, v| {
            let e = g.gather(v[0], &[4, 1, 1, 0]);
            let z = g.matmul(e, v[1]);
            let z = g.scale(z, 3.0);
            let l = g.weighted_bce(z, &[1.0, 0.0, 1.0, 0.0], 2.5);
            let p = g.pick(e, 2, 1);
            g.add(l, p)
        });
    }

    #[test]
    fn bce_hand_values() {
        let z = Matrix::filled(1, 1, 0.0);
        let mut g = Graph::new();
        let v = g.param(&z);
        let l = g.weighted_bce(v, &[1.0], 1.0);
        assert!((g.value(l).scalar() - std::f64::consts::LN_2).abs() < 1e-12);
        let l2 = g.weighted_bce(v, &[1.0], 2.0);
        assert!((g.value(l2).scalar() - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        let empty = Matrix::zeros(0, 1);
        let e = g.param(&empty);
        let l3 = g.weighted_bce(e, &[], 1.0);
        assert_eq!(g.value(l3).scalar(), 0.0);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let m = random(&mut rng, 3, 7).map(|x| x * 50.0);
        let mut g = Graph::new();
        let v = g.param(&m);
        let s = g.softmax_rows(v);
        for r in 0..3 {
            assert!((g.value(s).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn stable_helpers() {
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(softplus(1000.0).is_finite());
    }
}

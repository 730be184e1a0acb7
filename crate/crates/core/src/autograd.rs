//! Minimal reverse-mode automatic differentiation over dense row-major `f64`
//! matrices.
//!
//! Every model in this crate processes one sentence at a time as a
//! `[n_tokens × dim]` matrix, so a 2-D tape is all that training needs.
//! A [`Graph`] records operations eagerly (values are computed as nodes are
//! added) and [`Graph::backward`] walks the tape in reverse.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking a logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.cols, "matmul_t inner dimension");
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                out.data[i * other.rows + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        out
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "t_matmul inner dimension");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
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

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn argmax_row(&self, r: usize) -> usize {
        let row = self.row(r);
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        best
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Matrix) {
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Exp(Var),
    Ln(Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNormRows(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    SumRows(Var),
    CosineRows(Var, Var),
    LogSumExpRows(Var),
    Transpose(Var),
}

struct Node {
    value: Matrix,
    op: Op,
    /// Per-row scalars saved by layer norm (inverse std).
    aux: Vec<f64>,
}

/// Tape of eagerly-evaluated operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// `None` when `v` does not feed the differentiated output.
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(&id).and_then(|&v| self.of(v))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            aux: Vec::new(),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Binds a trainable parameter; repeated binds of the same id share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param);
        self.bound.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_t(self.value(b));
        self.push(value, Op::MatMulT(a, b))
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Matrix {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "elementwise shape mismatch");
        Matrix {
            rows: x.rows,
            cols: x.cols,
            data: x.data.iter().zip(&y.data).map(|(&p, &q)| f(p, q)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// `a + row` with `row` of shape `[1 × cols]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), r.shape(), "add_row shape");
        let mut value = x.clone();
        for i in 0..value.rows {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r.data) {
                *v += b;
            }
        }
        self.push(value, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols), r.shape(), "mul_row shape");
        let mut value = x.clone();
        for i in 0..value.rows {
            for (v, b) in value.row_mut(i).iter_mut().zip(&r.data) {
                *v *= b;
            }
        }
        self.push(value, Op::MulRow(a, row))
    }

    /// `a * col` with `col` of shape `[rows × 1]` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert_eq!((x.rows, 1), c.shape(), "mul_col shape");
        let mut value = x.clone();
        for i in 0..value.rows {
            let s = c.data[i];
            for v in value.row_mut(i) {
                *v *= s;
            }
        }
        self.push(value, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / (1.0 + (-x).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Natural log with inputs clamped at [`LOG_CLAMP`].
    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.max(LOG_CLAMP).ln());
        self.push(value, Op::Ln(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        self.push(value, Op::LogSoftmaxRows(a))
    }

    /// Normalizes every row to zero mean and unit variance (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let n = x.cols as f64;
        let mut value = x.clone();
        let mut inv_std = Vec::with_capacity(x.rows);
        for r in 0..value.rows {
            let row = value.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let v = self.push(value, Op::LayerNormRows(a));
        self.nodes[v.0].aux = inv_std;
        v
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let x = self.value(a);
        assert!(start + width <= x.cols, "slice_cols out of range");
        let mut value = Matrix::zeros(x.rows, width);
        for r in 0..x.rows {
            value
                .row_mut(r)
                .copy_from_slice(&x.row(r)[start..start + width]);
        }
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Matrix::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_mut(r)[offset..offset + x.cols].copy_from_slice(x.row(r));
            }
            offset += x.cols;
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols, cols, "concat_rows col mismatch");
            data.extend_from_slice(&x.data);
            rows += x.rows;
        }
        self.push(Matrix { rows, cols, data }, Op::ConcatRows(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let x = self.value(a);
        let mut value = Matrix::zeros(indices.len(), x.cols);
        for (k, &i) in indices.iter().enumerate() {
            value.row_mut(k).copy_from_slice(x.row(i));
        }
        self.push(value, Op::GatherRows(a, indices.to_vec()))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Matrix::filled(1, 1, s), Op::SumAll(a))
    }

    /// `[rows × cols] -> [rows × 1]`
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows).map(|r| x.row(r).iter().sum()).collect();
        self.push(
            Matrix {
                rows: x.rows,
                cols: 1,
                data,
            },
            Op::SumRows(a),
        )
    }

    /// Row-wise cosine similarity, `[rows × 1]`. Rows with zero norm yield 0.
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape(), "cosine_rows shape");
        let data = (0..x.rows)
            .map(|r| cosine(x.row(r), y.row(r)).unwrap_or(0.0))
            .collect();
        self.push(
            Matrix {
                rows: x.rows,
                cols: 1,
                data,
            },
            Op::CosineRows(a, b),
        )
    }

    pub fn log_sum_exp_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows).map(|r| log_sum_exp(x.row(r))).collect();
        self.push(
            Matrix {
                rows: x.rows,
                cols: 1,
                data,
            },
            Op::LogSumExpRows(a),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Reverse pass from a `[1 × 1]` output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Matrix::filled(1, 1, 1.0));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, dy.matmul_t(self.value(*b)));
                    acc(&mut grads, *b, self.value(*a).t_matmul(&dy));
                }
                Op::MatMulT(a, b) => {
                    acc(&mut grads, *a, dy.matmul(self.value(*b)));
                    acc(&mut grads, *b, dy.t_matmul(self.value(*a)));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy.clone());
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, dy.map(|v| -v));
                    acc(&mut grads, *a, dy.clone());
                }
                Op::Mul(a, b) => {
                    let (x, z) = (self.value(*a), self.value(*b));
                    let ga = zip(&dy, z, |d, q| d * q);
                    let gb = zip(&dy, x, |d, p| d * p);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, row) => {
                    let mut gr = Matrix::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for (g, d) in gr.data.iter_mut().zip(dy.row(r)) {
                            *g += d;
                        }
                    }
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, dy.clone());
                }
                Op::MulRow(a, row) => {
                    let (x, rv) = (self.value(*a), self.value(*row));
                    let mut ga = dy.clone();
                    let mut gr = Matrix::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        for c in 0..dy.cols {
                            let d = dy.get(r, c);
                            ga.set(r, c, d * rv.data[c]);
                            gr.data[c] += d * x.get(r, c);
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *row, gr);
                }
                Op::MulCol(a, col) => {
                    let (x, cv) = (self.value(*a), self.value(*col));
                    let mut ga = dy.clone();
                    let mut gc = Matrix::zeros(dy.rows, 1);
                    for r in 0..dy.rows {
                        for c in 0..dy.cols {
                            let d = dy.get(r, c);
                            ga.set(r, c, d * cv.data[r]);
                            gc.data[r] += d * x.get(r, c);
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *col, gc);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, dy.map(|d| d * s)),
                Op::AddScalar(a) => acc(&mut grads, *a, dy.clone()),
                Op::Tanh(a) => acc(&mut grads, *a, zip(&dy, y, |d, t| d * (1.0 - t * t))),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip(&dy, y, |d, s| d * s * (1.0 - s))),
                Op::Relu(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, zip(&dy, x, |d, v| if v > 0.0 { d } else { 0.0 }));
                }
                Op::Exp(a) => acc(&mut grads, *a, zip(&dy, y, |d, e| d * e)),
                Op::Ln(a) => {
                    let x = self.value(*a);
                    let g = zip(&dy, x, |d, v| if v >= LOG_CLAMP { d / v } else { 0.0 });
                    acc(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let mut g = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, dr) = (y.row(r), dy.row(r));
                        let dot: f64 = yr.iter().zip(dr).map(|(p, d)| p * d).sum();
                        for (c, gv) in g.row_mut(r).iter_mut().enumerate() {
                            *gv = yr[c] * (dr[c] - dot);
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::LogSoftmaxRows(a) => {
                    let mut g = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, dr) = (y.row(r), dy.row(r));
                        let total: f64 = dr.iter().sum();
                        for (c, gv) in g.row_mut(r).iter_mut().enumerate() {
                            *gv = dr[c] - yr[c].exp() * total;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::LayerNormRows(a) => {
                    let n = y.cols as f64;
                    let mut g = Matrix::zeros(y.rows, y.cols);
                    for r in 0..y.rows {
                        let (yr, dr) = (y.row(r), dy.row(r));
                        let mean_d = dr.iter().sum::<f64>() / n;
                        let mean_dy = dr.iter().zip(yr).map(|(d, v)| d * v).sum::<f64>() / n;
                        let inv = node.aux[r];
                        for (c, gv) in g.row_mut(r).iter_mut().enumerate() {
                            *gv = inv * (dr[c] - mean_d - yr[c] * mean_dy);
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let mut g = Matrix::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        g.row_mut(r)[*start..*start + dy.cols].copy_from_slice(dy.row(r));
                    }
                    acc(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols;
                        let mut g = Matrix::zeros(dy.rows, w);
                        for r in 0..dy.rows {
                            g.row_mut(r).copy_from_slice(&dy.row(r)[offset..offset + w]);
                        }
                        offset += w;
                        acc(&mut grads, p, g);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let h = self.value(p).rows;
                        let data = dy.data[offset * dy.cols..(offset + h) * dy.cols].to_vec();
                        offset += h;
                        acc(
                            &mut grads,
                            p,
                            Matrix {
                                rows: h,
                                cols: dy.cols,
                                data,
                            },
                        );
                    }
                }
                Op::GatherRows(a, indices) => {
                    let x = self.value(*a);
                    let mut g = Matrix::zeros(x.rows, x.cols);
                    for (k, &i) in indices.iter().enumerate() {
                        for (gv, d) in g.row_mut(i).iter_mut().zip(dy.row(k)) {
                            *gv += d;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::SumAll(a) => {
                    let x = self.value(*a);
                    acc(&mut grads, *a, Matrix::filled(x.rows, x.cols, dy.data[0]));
                }
                Op::SumRows(a) => {
                    let x = self.value(*a);
                    let mut g = Matrix::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        g.row_mut(r).fill(dy.data[r]);
                    }
                    acc(&mut grads, *a, g);
                }
                Op::CosineRows(a, b) => {
                    let (x, z) = (self.value(*a), self.value(*b));
                    let mut ga = Matrix::zeros(x.rows, x.cols);
                    let mut gb = Matrix::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        let (xr, zr) = (x.row(r), z.row(r));
                        let nx = norm(xr);
                        let nz = norm(zr);
                        if nx == 0.0 || nz == 0.0 {
                            continue;
                        }
                        let cos = y.data[r];
                        let d = dy.data[r];
                        for c in 0..x.cols {
                            ga.set(r, c, d * (zr[c] / (nx * nz) - cos * xr[c] / (nx * nx)));
                            gb.set(r, c, d * (xr[c] / (nx * nz) - cos * zr[c] / (nz * nz)));
                        }
                    }
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::LogSumExpRows(a) => {
                    let x = self.value(*a);
                    let mut g = softmax_rows(x);
                    for r in 0..g.rows {
                        let d = dy.data[r];
                        for v in g.row_mut(r) {
                            *v *= d;
                        }
                    }
                    acc(&mut grads, *a, g);
                }
                Op::Transpose(a) => acc(&mut grads, *a, dy.transpose()),
            }
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[idx] = Some(dy);
            }
        }

        Gradients {
            grads,
            params: self.bound.clone(),
        }
    }
}

fn zip(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    Matrix {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Adam with per-parameter learning rates and optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    first: HashMap<ParamId, Matrix>,
    second: HashMap<ParamId, Matrix>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
            step: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: impl Fn(ParamId) -> f64) {
        self.step += 1;
        let mut ids: Vec<ParamId> = grads.param_ids().collect();
        ids.sort();
        let total: f64 = ids
            .iter()
            .filter_map(|&id| grads.param(id))
            .map(|g| g.data.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip = match self.clip_norm {
            Some(max) if total > max => max / total,
            _ => 1.0,
        };
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for id in ids {
            let Some(g) = grads.param(id) else { continue };
            let value = store.get_mut(id);
            let m = self
                .first
                .entry(id)
                .or_insert_with(|| Matrix::zeros(g.rows, g.cols));
            if m.shape() != g.shape() {
                *m = Matrix::zeros(g.rows, g.cols);
            }
            let v = self
                .second
                .entry(id)
                .or_insert_with(|| Matrix::zeros(g.rows, g.cols));
            if v.shape() != g.shape() {
                *v = Matrix::zeros(g.rows, g.cols);
            }
            let rate = lr(id);
            for i in 0..g.data.len() {
                let gi = g.data[i] * clip;
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m.data[i] / bc1;
                let vh = v.data[i] / bc2;
                value.data[i] -= rate * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Central finite differences of `f` w.r.t. every entry of parameter `id`.
    fn numeric_grad(store: &ParamStore, id: ParamId, f: &dyn Fn(&ParamStore) -> f64) -> Matrix {
        let base = store.get(id).clone();
        let mut out = Matrix::zeros(base.rows, base.cols);
        let h = 1e-6;
        for i in 0..base.data.len() {
            let mut s = store.clone();
            s.get_mut(id).data[i] += h;
            let up = f(&s);
            s.get_mut(id).data[i] -= 2.0 * h;
            let down = f(&s);
            out.data[i] = (up - down) / (2.0 * h);
        }
        out
    }

    fn check(build: impl Fn(&mut Graph, &ParamStore) -> Var, store: &ParamStore) {
        let mut g = Graph::new();
        let out = build(&mut g, store);
        let grads = g.backward(out);
        let f = |s: &ParamStore| {
            let mut g = Graph::new();
            let o = build(&mut g, s);
            g.scalar(o)
        };
        for id in store.ids() {
            let analytic = grads.param(id).cloned().unwrap_or_else(|| {
                let m = store.get(id);
                Matrix::zeros(m.rows(), m.cols())
            });
            let numeric = numeric_grad(store, id, &f);
            for (a, n) in analytic.data().iter().zip(numeric.data()) {
                let denom = a.abs().max(n.abs()).max(1e-6);
                assert!(
                    (a - n).abs() / denom < 1e-5 || (a - n).abs() < 1e-8,
                    "param {}: analytic {a} vs numeric {n}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn matmul_variants_agree() {
        let a = rand_matrix(3, 4, 1);
        let b = rand_matrix(4, 5, 2);
        let c = a.matmul(&b);
        assert_eq!(c, a.matmul_t(&b.transpose()));
        assert_eq!(c, a.transpose().t_matmul(&b));
    }

    #[test]
    fn gradients_of_dense_ops() {
        let mut store = ParamStore::new();
        let x = store.add("x", rand_matrix(3, 4, 3));
        let w = store.add("w", rand_matrix(5, 4, 4));
        let b = store.add("b", rand_matrix(1, 5, 5));
        let gamma = store.add("gamma", rand_matrix(1, 5, 6));
        check(
            |g, s| {
                let xv = g.param(s, x);
                let wv = g.param(s, w);
                let bv = g.param(s, b);
                let gv = g.param(s, gamma);
                let h = g.matmul_t(xv, wv);
                let h = g.add_row(h, bv);
                let h = g.layer_norm_rows(h, 1e-5);
                let h = g.mul_row(h, gv);
                let t = g.tanh(h);
                let s2 = g.sigmoid(t);
                let p = g.softmax_rows(s2);
                let l = g.ln(p);
                let e = g.exp(t);
                let m = g.mul(l, e);
                g.sum_all(m)
            },
            &store,
        );
    }

    #[test]
    fn gradients_of_structural_ops() {
        let mut store = ParamStore::new();
        let a = store.add("a", rand_matrix(3, 4, 7));
        let b = store.add("b", rand_matrix(3, 4, 8));
        let c = store.add("c", rand_matrix(3, 1, 9));
        check(
            |g, s| {
                let av = g.param(s, a);
                let bv = g.param(s, b);
                let cv = g.param(s, c);
                let left = g.slice_cols(av, 1, 2);
                let right = g.slice_cols(bv, 0, 3);
                let cat = g.concat_cols(&[left, right]);
                let rows = g.concat_rows(&[cat, cat]);
                let picked = g.gather_rows(rows, &[0, 4, 2, 2]);
                let tr = g.transpose(picked);
                let sq = g.matmul(picked, tr);
                let lse = g.log_sum_exp_rows(sq);
                let cos = g.cosine_rows(av, bv);
                let scaled = g.mul_col(av, cv);
                let sr = g.sum_rows(scaled);
                let z = g.add(cos, sr);
                let z = g.sub(z, cv);
                let ls = g.log_softmax_rows(av);
                let r = g.relu(ls);
                let total = g.sum_all(lse);
                let total2 = g.sum_all(z);
                let total3 = g.sum_all(r);
                let t = g.add(total, total2);
                let t = g.add(t, total3);
                let t = g.scale(t, 0.5);
                g.add_scalar(t, 1.0)
            },
            &store,
        );
    }

    #[test]
    fn cosine_zero_norm_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), None);
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros(1, 2));
        let b = g.constant(Matrix::filled(1, 2, 1.0));
        let c = g.cosine_rows(a, b);
        assert_eq!(g.scalar(c), 0.0);
    }

    #[test]
    fn adam_decreases_quadratic() {
        let mut store = ParamStore::new();
        let x = store.add("x", Matrix::filled(1, 2, 3.0));
        let mut opt = Adam::new();
        for _ in 0..500 {
            let mut g = Graph::new();
            let v = g.param(&store, x);
            let sq = g.mul(v, v);
            let loss = g.sum_all(sq);
            let grads = g.backward(loss);
            opt.step(&mut store, &grads, |_| 0.05);
        }
        assert!(store.get(x).frobenius_norm() < 1e-2);
    }
}

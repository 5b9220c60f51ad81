//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Values are always
//! two-dimensional: vectors are `1×n`, scalars are `1×1`. Parameters live in a
//! [`ParamStore`] that the graph borrows, so building a graph never copies
//! weights. Calling [`Graph::backward`] walks the tape in reverse and returns
//! gradients for every parameter touched by the pass.

use ndarray::{concatenate, s, Array2, Axis};

use crate::params::{ParamId, ParamStore};

pub type Matrix = Array2<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    TMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulRowsConst(Var, Vec<f64>),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
        eps: f64,
    },
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    RepeatRows(Var),
    Reshape(Var),
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SoftCrossEntropy {
        logits: Var,
        targets: Matrix,
        probs: Matrix,
    },
}

struct Node {
    value: Option<Matrix>,
    op: Op,
    requires_grad: bool,
}

/// Tape of one forward evaluation.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    params: Vec<Option<Matrix>>,
    vars: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of a parameter, `None` when the pass never touched it.
    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradient of a leaf created with [`Graph::input`].
    pub fn var(&self, v: Var) -> Option<&Matrix> {
        self.vars.get(v.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients indexed by [`ParamId`], consumed.
    pub fn into_params(self) -> Vec<Option<Matrix>> {
        self.params
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of a plain matrix.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> &Matrix {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(m), _) => m,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    /// A constant that never receives gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Const,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked (inputs in gradient checks).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op: Op::Const,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf. Frozen parameters are read without gradient.
    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn frozen_param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b), &[a, b])
    }

    /// `aᵀ · b`
    pub fn t_matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).t().dot(self.value(b));
        self.push(v, Op::TMatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    /// `x + row` with `row` (1×D) broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.shape(row);
        assert!(r == 1 && c == self.shape(x).1, "add_row shape mismatch");
        let v = self.value(x) + self.value(row);
        self.push(v, Op::AddRow(x, row), &[x, row])
    }

    /// `x ⊙ row` with `row` (1×D) broadcast over the rows of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.shape(row);
        assert!(r == 1 && c == self.shape(x).1, "mul_row shape mismatch");
        let v = self.value(x) * self.value(row);
        self.push(v, Op::MulRow(x, row), &[x, row])
    }

    /// `x ⊙ col` with `col` (R×1) broadcast over the columns of `x`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let (r, c) = self.shape(col);
        assert!(c == 1 && r == self.shape(x).0, "mul_col shape mismatch");
        let v = self.value(x) * self.value(col);
        self.push(v, Op::MulCol(x, col), &[x, col])
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x) * k;
        self.push(v, Op::Scale(x, k), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let v = self.value(x) + k;
        self.push(v, Op::AddScalar(x), &[x])
    }

    /// Multiplies row `i` by the constant `weights[i]`.
    pub fn mul_rows_const(&mut self, x: Var, weights: Vec<f64>) -> Var {
        assert_eq!(
            weights.len(),
            self.shape(x).0,
            "mul_rows_const length mismatch"
        );
        let mut v = self.value(x).clone();
        for (mut row, &w) in v.rows_mut().into_iter().zip(&weights) {
            row *= w;
        }
        self.push(v, Op::MulRowsConst(x, weights), &[x])
    }

    /// Elementwise product with a constant mask of the same shape.
    pub fn mul_const(&mut self, x: Var, mask: Matrix) -> Var {
        let c = self.constant(mask);
        self.mul(x, c)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(gelu);
        self.push(v, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(sigmoid);
        self.push(v, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).mapv(f64::tanh);
        self.push(v, Op::Tanh(x), &[x])
    }

    /// Standardizes each row to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in out.rows_mut() {
            let mean = row.sum() / d;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / d;
            let is = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        self.push(out, Op::LayerNorm { x, inv_std }, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let v = softmax_rows(self.value(x));
        self.push(v, Op::Softmax(x), &[x])
    }

    /// Divides each row by `‖row‖ + eps`; all-zero rows stay zero.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.nrows());
        for mut row in out.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n + eps;
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { x, norms, eps }, &[x])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(x, start), &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols row mismatch");
        self.push(v, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice(s![start..start + len, ..]).to_owned();
        self.push(v, Op::SliceRows(x, start), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows column mismatch");
        self.push(v, Op::ConcatRows(parts.to_vec()), parts)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.value(x).select(Axis(0), idx);
        self.push(v, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// Repeats a single row `n` times.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), 1, "repeat_rows expects a single row");
        let v = xv.broadcast((n, xv.ncols())).expect("broadcast").to_owned();
        self.push(v, Op::RepeatRows(x), &[x])
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), rows * cols, "reshape size mismatch");
        let flat: Vec<f64> = xv.iter().copied().collect();
        let v = Matrix::from_shape_vec((rows, cols), flat).expect("reshape");
        self.push(v, Op::Reshape(x), &[x])
    }

    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("mean of empty")
            .insert_axis(Axis(0));
        self.push(v, Op::MeanRows(x), &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Matrix::from_elem((1, 1), self.value(x).sum());
        self.push(v, Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let v = Matrix::from_elem((1, 1), xv.sum() / xv.len() as f64);
        self.push(v, Op::MeanAll(x), &[x])
    }

    /// Mean over rows of `-Σ_k targets[r,k] · log softmax(logits)[r,k]`.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Matrix) -> Var {
        assert_eq!(
            self.shape(logits),
            targets.dim(),
            "cross-entropy shape mismatch"
        );
        let lv = self.value(logits);
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (mut prow, trow) in probs.rows_mut().into_iter().zip(targets.rows()) {
            let max = prow.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let lse = prow.fold(0.0, |acc, &v| acc + (v - max).exp()).ln() + max;
            for (p, &t) in prow.iter_mut().zip(trow.iter()) {
                let logp = *p - lse;
                if t != 0.0 {
                    total -= t * logp;
                }
                *p = logp.exp();
            }
        }
        let rows = targets.nrows() as f64;
        let v = Matrix::from_elem((1, 1), total / rows);
        self.push(
            v,
            Op::SoftCrossEntropy {
                logits,
                targets,
                probs,
            },
            &[logits],
        )
    }

    /// Reverse pass seeded with `d loss / d loss = 1`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let seed = Matrix::ones(self.shape(loss));
        self.backward_with(loss, seed)
    }

    pub fn backward_with(&self, out: Var, seed: Matrix) -> Gradients {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        let mut params: Vec<Option<Matrix>> = (0..self.store.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            // Input leaves keep their gradient for `Gradients::var`.
            if !node.requires_grad || matches!(node.op, Op::Const) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Const => {}
                Op::Param(id) => accumulate(&mut params[id.index()], g.clone()),
                Op::MatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(&self.value(*b).t());
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).t().dot(&g);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.needs(*a) {
                        let ga = g.dot(self.value(*b));
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = g.t().dot(self.value(*a));
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::TMatMul(a, b) => {
                    if self.needs(*a) {
                        let ga = self.value(*b).dot(&g.t());
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = self.value(*a).dot(&g);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, g.clone());
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    if self.needs(*b) {
                        self.acc(&mut grads, *b, -&g);
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let ga = &g * self.value(*b);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.needs(*b) {
                        let gb = &g * self.value(*a);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.needs(*row) {
                        let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *row, gr);
                    }
                    self.acc(&mut grads, *x, g);
                }
                Op::MulRow(x, row) => {
                    if self.needs(*row) {
                        let gr = (&g * self.value(*x)).sum_axis(Axis(0)).insert_axis(Axis(0));
                        self.acc(&mut grads, *row, gr);
                    }
                    if self.needs(*x) {
                        let gx = &g * self.value(*row);
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::MulCol(x, col) => {
                    if self.needs(*col) {
                        let gc = (&g * self.value(*x)).sum_axis(Axis(1)).insert_axis(Axis(1));
                        self.acc(&mut grads, *col, gc);
                    }
                    if self.needs(*x) {
                        let gx = &g * self.value(*col);
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::Scale(x, k) => self.acc(&mut grads, *x, g * *k),
                Op::AddScalar(x) => self.acc(&mut grads, *x, g),
                Op::MulRowsConst(x, w) => {
                    let mut gx = g;
                    for (mut row, &wi) in gx.rows_mut().into_iter().zip(w) {
                        row *= wi;
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Gelu(x) => {
                    let mut gx = g;
                    gx.zip_mut_with(self.value(*x), |gi, &xi| *gi *= gelu_grad(xi));
                    self.acc(&mut grads, *x, gx);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = g;
                    gx.zip_mut_with(y, |gi, &yi| *gi *= yi * (1.0 - yi));
                    self.acc(&mut grads, *x, gx);
                }
                Op::Tanh(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = g;
                    gx.zip_mut_with(y, |gi, &yi| *gi *= 1.0 - yi * yi);
                    self.acc(&mut grads, *x, gx);
                }
                Op::LayerNorm { x, inv_std } => {
                    let y = node.value.as_ref().unwrap();
                    let d = y.ncols() as f64;
                    let mut gx = g;
                    for ((mut grow, yrow), &is) in
                        gx.rows_mut().into_iter().zip(y.rows()).zip(inv_std)
                    {
                        let mean_g = grow.sum() / d;
                        let mean_gy = grow.dot(&yrow) / d;
                        for (gi, &yi) in grow.iter_mut().zip(yrow.iter()) {
                            *gi = is * (*gi - mean_g - yi * mean_gy);
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().unwrap();
                    let mut gx = g;
                    for (mut grow, yrow) in gx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.dot(&yrow);
                        for (gi, &yi) in grow.iter_mut().zip(yrow.iter()) {
                            *gi = yi * (*gi - dot);
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::L2Normalize { x, norms, eps } => {
                    let xv = self.value(*x);
                    let mut gx = g;
                    for ((mut grow, xrow), &n) in
                        gx.rows_mut().into_iter().zip(xv.rows()).zip(norms)
                    {
                        let denom = n + eps;
                        if n > 0.0 {
                            let dot = grow.dot(&xrow);
                            let k = dot / (denom * denom * n);
                            for (gi, &xi) in grow.iter_mut().zip(xrow.iter()) {
                                *gi = *gi / denom - k * xi;
                            }
                        } else {
                            grow /= denom;
                        }
                    }
                    self.acc(&mut grads, *x, gx);
                }
                Op::SliceCols(x, start) => {
                    if self.needs(*x) {
                        let mut gx = Matrix::zeros(self.shape(*x));
                        gx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.shape(p).1;
                        if self.needs(p) {
                            let gp = g.slice(s![.., off..off + w]).to_owned();
                            self.acc(&mut grads, p, gp);
                        }
                        off += w;
                    }
                }
                Op::SliceRows(x, start) => {
                    if self.needs(*x) {
                        let mut gx = Matrix::zeros(self.shape(*x));
                        gx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let h = self.shape(p).0;
                        if self.needs(p) {
                            let gp = g.slice(s![off..off + h, ..]).to_owned();
                            self.acc(&mut grads, p, gp);
                        }
                        off += h;
                    }
                }
                Op::GatherRows(x, idx) => {
                    if self.needs(*x) {
                        let mut gx = Matrix::zeros(self.shape(*x));
                        for (r, &i) in idx.iter().enumerate() {
                            let mut dst = gx.row_mut(i);
                            dst += &g.row(r);
                        }
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::RepeatRows(x) => {
                    let gx = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.acc(&mut grads, *x, gx);
                }
                Op::Reshape(x) => {
                    let shape = self.shape(*x);
                    let flat: Vec<f64> = g.iter().copied().collect();
                    let gx = Matrix::from_shape_vec(shape, flat).expect("reshape grad");
                    self.acc(&mut grads, *x, gx);
                }
                Op::MeanRows(x) => {
                    let (r, c) = self.shape(*x);
                    let row = &g / r as f64;
                    let gx = row.broadcast((r, c)).unwrap().to_owned();
                    self.acc(&mut grads, *x, gx);
                }
                Op::SumAll(x) => {
                    let gx = Matrix::from_elem(self.shape(*x), g[[0, 0]]);
                    self.acc(&mut grads, *x, gx);
                }
                Op::MeanAll(x) => {
                    let shape = self.shape(*x);
                    let n = (shape.0 * shape.1) as f64;
                    let gx = Matrix::from_elem(shape, g[[0, 0]] / n);
                    self.acc(&mut grads, *x, gx);
                }
                Op::SoftCrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let rows = targets.nrows() as f64;
                    let k = g[[0, 0]] / rows;
                    let mut gx = probs.clone();
                    for (mut grow, trow) in gx.rows_mut().into_iter().zip(targets.rows()) {
                        let mass = trow.sum();
                        for (gi, &t) in grow.iter_mut().zip(trow.iter()) {
                            *gi = k * (*gi * mass - t);
                        }
                    }
                    self.acc(&mut grads, *logits, gx);
                }
            }
        }
        Gradients {
            params,
            vars: grads,
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn acc(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if self.nodes[v.0].requires_grad {
            accumulate(&mut grads[v.0], g);
        }
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(existing) => *existing += &g,
        None => *slot = Some(g),
    }
}

//! Reverse-mode automatic differentiation over dense row-major `f64` matrices.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value and
//! the recipe needed to push gradients back to its inputs. Nodes built only
//! from constants never require gradients, so frozen sub-networks (the encoder,
//! pseudo-label models) cost a forward pass and nothing else.

use ndarray::{Array2, Axis, Zip};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatMulTN(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    DivRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Powf(Var, f64),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SumCols(Var),
    Gather(Var, Vec<Option<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// An input that never receives gradients.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    /// Stop-gradient: a constant copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn unary(&mut self, a: Var, value: Array2<f64>, op: Op) -> Var {
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, value: Array2<f64>, op: Op) -> Var {
        let rg = self.rg(a) || self.rg(b);
        self.push(value, op, rg)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Array2<f64> {
        self.nodes[a.0].value.mapv(f)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.binary(a, b, value, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.binary(a, b, value, Op::MatMulNT(a, b))
    }

    /// `aᵀ · b`
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).t().dot(self.value(b));
        self.binary(a, b, value, Op::MatMulTN(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let value = self.value(a) + self.value(b);
        self.binary(a, b, value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let value = self.value(a) - self.value(b);
        self.binary(a, b, value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let value = self.value(a) * self.value(b);
        self.binary(a, b, value, Op::Mul(a, b))
    }

    /// `a + row` with `row` (1×C) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: expects a 1xC row");
        let value = self.value(a) + self.value(row);
        self.binary(a, row, value, Op::AddRow(a, row))
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row: expects a 1xC row");
        let value = self.value(a) * self.value(row);
        self.binary(a, row, value, Op::MulRow(a, row))
    }

    pub fn div_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "div_row: expects a 1xC row");
        let value = self.value(a) / self.value(row);
        self.binary(a, row, value, Op::DivRow(a, row))
    }

    /// `a * col` with `col` (R×1) broadcast over the columns of `a`.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1, "mul_col: expects an Rx1 column");
        let value = self.value(a) * self.value(col);
        self.binary(a, col, value, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.map(a, |x| x * s);
        self.unary(a, value, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.map(a, |x| x + c);
        self.unary(a, value, Op::Offset(a))
    }

    /// `c - a`
    pub fn rsub(&mut self, c: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.offset(neg, c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x.max(0.0));
        self.unary(a, value, Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.map(a, gelu);
        self.unary(a, value, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.map(a, sigmoid);
        self.unary(a, value, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::tanh);
        self.unary(a, value, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::exp);
        self.unary(a, value, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.map(a, f64::ln);
        self.unary(a, value, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.map(a, |x| x * x);
        self.unary(a, value, Op::Square(a))
    }

    /// Elementwise `a^e`; the base must be positive wherever `e < 1`.
    pub fn powf(&mut self, a: Var, e: f64) -> Var {
        let value = self.map(a, |x| x.powf(e));
        self.unary(a, value, Op::Powf(a, e))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.map(a, |x| x.clamp(lo, hi));
        self.unary(a, value, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.unary(a, value, Op::SoftmaxRows(a))
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + eps)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let n = row.len() as f64;
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &x| acc + (x - mean) * (x - mean)) / n;
            let inv = 1.0 / (var + eps).sqrt();
            row.mapv_inplace(|x| (x - mean) * inv);
        }
        self.unary(a, value, Op::LayerNormRows(a, eps))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        self.unary(a, value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.unary(a, value, Op::Mean(a))
    }

    /// Column sums: R×C → 1×C.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        self.unary(a, value, Op::SumRows(a))
    }

    /// Row sums: R×C → R×1.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(1)).insert_axis(Axis(1));
        self.unary(a, value, Op::SumCols(a))
    }

    /// General re-indexing: output element `i` (row-major over `shape`) reads
    /// flat element `index[i]` of `a`, or zero when `None`.
    pub fn gather(&mut self, a: Var, shape: (usize, usize), index: Vec<Option<usize>>) -> Var {
        assert_eq!(shape.0 * shape.1, index.len(), "gather: index length");
        let src = self.value(a);
        let src = src.as_standard_layout();
        let flat = src.as_slice().expect("standard layout");
        let data: Vec<f64> = index
            .iter()
            .map(|i| i.map_or(0.0, |i| flat[i]))
            .collect();
        let value = Array2::from_shape_vec(shape, data).expect("gather shape");
        self.unary(a, value, Op::Gather(a, index))
    }

    /// Reinterpret the row-major buffer with a new shape.
    pub fn reshape(&mut self, a: Var, shape: (usize, usize)) -> Var {
        let n = shape.0 * shape.1;
        assert_eq!(n, self.value(a).len(), "reshape: element count");
        self.gather(a, shape, (0..n).map(Some).collect())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice(ndarray::s![start..start + len, ..])
            .to_owned();
        self.unary(a, value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice(ndarray::s![.., start..start + len])
            .to_owned();
        self.unary(a, value, Op::SliceCols(a, start))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        self.unary(a, value, Op::Transpose(a))
    }

    /// Back-propagate from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward: loss must be 1x1");
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, dy: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, g: Array2<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, dy.dot(&val(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, val(*a).t().dot(dy));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    acc(*a, dy.dot(val(*b)));
                }
                if self.rg(*b) {
                    acc(*b, dy.t().dot(val(*a)));
                }
            }
            Op::MatMulTN(a, b) => {
                if self.rg(*a) {
                    acc(*a, val(*b).dot(&dy.t()));
                }
                if self.rg(*b) {
                    acc(*b, val(*a).dot(dy));
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, -dy);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, dy * val(*b));
                }
                if self.rg(*b) {
                    acc(*b, dy * val(*a));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, dy.clone());
                if self.rg(*row) {
                    acc(*row, dy.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    acc(*a, dy * val(*row));
                }
                if self.rg(*row) {
                    acc(*row, (dy * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::DivRow(a, row) => {
                let r = val(*row);
                if self.rg(*a) {
                    acc(*a, dy / r);
                }
                if self.rg(*row) {
                    let g = (dy * y / r).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(*row, -g);
                }
            }
            Op::MulCol(a, col) => {
                if self.rg(*a) {
                    acc(*a, dy * val(*col));
                }
                if self.rg(*col) {
                    acc(*col, (dy * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1)));
                }
            }
            Op::Scale(a, s) => acc(*a, dy * *s),
            Op::Offset(a) => acc(*a, dy.clone()),
            Op::Relu(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(val(*a)).for_each(|g, &x| {
                    if x <= 0.0 {
                        *g = 0.0
                    }
                });
                acc(*a, g);
            }
            Op::Gelu(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g)
                    .and(val(*a))
                    .for_each(|g, &x| *g *= gelu_grad(x));
                acc(*a, g);
            }
            Op::Sigmoid(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(y).for_each(|g, &s| *g *= s * (1.0 - s));
                acc(*a, g);
            }
            Op::Tanh(a) => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(y).for_each(|g, &t| *g *= 1.0 - t * t);
                acc(*a, g);
            }
            Op::Exp(a) => acc(*a, dy * y),
            Op::Log(a) => acc(*a, dy / val(*a)),
            Op::Square(a) => acc(*a, dy * val(*a) * 2.0),
            Op::Powf(a, e) => {
                let mut g = dy.clone();
                Zip::from(&mut g)
                    .and(val(*a))
                    .for_each(|g, &x| *g *= e * x.powf(e - 1.0));
                acc(*a, g);
            }
            Op::Clamp(a, lo, hi) => {
                let mut g = dy.clone();
                Zip::from(&mut g).and(val(*a)).for_each(|g, &x| {
                    if x < *lo || x > *hi {
                        *g = 0.0
                    }
                });
                acc(*a, g);
            }
            Op::SoftmaxRows(a) => {
                let mut g = dy * y;
                for (mut grow, yrow) in g.rows_mut().into_iter().zip(y.rows()) {
                    let s = grow.sum();
                    Zip::from(&mut grow).and(yrow).for_each(|gi, &yi| *gi -= yi * s);
                }
                acc(*a, g);
            }
            Op::LayerNormRows(a, eps) => {
                let x = val(*a);
                let mut g = Array2::zeros(x.dim());
                for ((mut grow, xrow), (yrow, dyrow)) in g
                    .rows_mut()
                    .into_iter()
                    .zip(x.rows())
                    .zip(y.rows().into_iter().zip(dy.rows()))
                {
                    let n = xrow.len() as f64;
                    let mean = xrow.sum() / n;
                    let var = xrow.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let mean_dy = dyrow.sum() / n;
                    let mean_dyy = dyrow.dot(&yrow) / n;
                    Zip::from(&mut grow)
                        .and(dyrow)
                        .and(yrow)
                        .for_each(|gi, &d, &yi| *gi = inv * (d - mean_dy - yi * mean_dyy));
                }
                acc(*a, g);
            }
            Op::Sum(a) => {
                let d = dy[[0, 0]];
                acc(*a, Array2::from_elem(val(*a).dim(), d));
            }
            Op::Mean(a) => {
                let x = val(*a);
                let d = dy[[0, 0]] / x.len() as f64;
                acc(*a, Array2::from_elem(x.dim(), d));
            }
            Op::SumRows(a) => {
                let x = val(*a);
                let g = dy.broadcast(x.dim()).expect("broadcast").to_owned();
                acc(*a, g);
            }
            Op::SumCols(a) => {
                let x = val(*a);
                let g = dy.broadcast(x.dim()).expect("broadcast").to_owned();
                acc(*a, g);
            }
            Op::Gather(a, index) => {
                let src_dim = val(*a).dim();
                let mut g = vec![0.0; src_dim.0 * src_dim.1];
                let dy = dy.as_standard_layout();
                let d = dy.as_slice().expect("standard layout");
                for (o, i) in index.iter().enumerate() {
                    if let Some(i) = i {
                        g[*i] += d[o];
                    }
                }
                acc(*a, Array2::from_shape_vec(src_dim, g).expect("gather grad"));
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let rows = val(*p).nrows();
                    if self.rg(*p) {
                        acc(*p, dy.slice(ndarray::s![start..start + rows, ..]).to_owned());
                    }
                    start += rows;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for p in parts {
                    let cols = val(*p).ncols();
                    if self.rg(*p) {
                        acc(*p, dy.slice(ndarray::s![.., start..start + cols]).to_owned());
                    }
                    start += cols;
                }
            }
            Op::SliceRows(a, start) => {
                let mut g = Array2::zeros(val(*a).dim());
                g.slice_mut(ndarray::s![*start..*start + dy.nrows(), ..])
                    .assign(dy);
                acc(*a, g);
            }
            Op::SliceCols(a, start) => {
                let mut g = Array2::zeros(val(*a).dim());
                g.slice_mut(ndarray::s![.., *start..*start + dy.ncols()])
                    .assign(dy);
                acc(*a, g);
            }
            Op::Transpose(a) => acc(*a, dy.t().to_owned()),
        }
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn numerical_gradient(
    x: &Array2<f64>,
    h: f64,
    mut f: impl FnMut(&Array2<f64>) -> f64,
) -> Array2<f64> {
    let mut probe = x.clone();
    let mut out = Array2::zeros(x.dim());
    for idx in 0..x.len() {
        let (r, c) = (idx / x.ncols(), idx % x.ncols());
        let orig = probe[[r, c]];
        probe[[r, c]] = orig + h;
        let up = f(&probe);
        probe[[r, c]] = orig - h;
        let down = f(&probe);
        probe[[r, c]] = orig;
        out[[r, c]] = (up - down) / (2.0 * h);
    }
    out
}

/// Max elementwise relative error `|a-b| / max(|a|+|b|, floor)`.
pub fn relative_error(a: &Array2<f64>, b: &Array2<f64>, floor: f64) -> f64 {
    Zip::from(a)
        .and(b)
        .fold(0.0f64, |m, &x, &y| m.max((x - y).abs() / (x.abs() + y.abs()).max(floor)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Checks d(sum(w ⊙ f(x)))/dx against finite differences.
    fn check_unary(build: impl Fn(&mut Graph, Var) -> Var, x: Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probe_shape = {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let out = build(&mut g, v);
            g.shape(out)
        };
        let w = rand_mat(&mut rng, probe_shape.0, probe_shape.1);
        let eval = |x: &Array2<f64>| {
            let mut g = Graph::new();
            let v = g.leaf(x.clone());
            let out = build(&mut g, v);
            let wv = g.constant(w.clone());
            let m = g.mul(out, wv);
            let s = g.sum(m);
            (g, v, s)
        };
        let (g, v, s) = eval(&x);
        let grads = g.backward(s);
        let analytic = grads.get(v).unwrap().clone();
        let numeric = numerical_gradient(&x, 1e-5, |x| {
            let (g, _, s) = eval(x);
            g.scalar(s)
        });
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(err < 1e-6, "relative error {err}\n{analytic}\n{numeric}");
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_mat(&mut rng, 3, 4);
        check_unary(|g, v| g.gelu(v), x.clone());
        check_unary(|g, v| g.sigmoid(v), x.clone());
        check_unary(|g, v| g.tanh(v), x.clone());
        check_unary(|g, v| g.exp(v), x.clone());
        check_unary(|g, v| g.square(v), x.clone());
        check_unary(|g, v| g.softmax_rows(v), x.clone());
        check_unary(|g, v| g.layer_norm_rows(v, 1e-5), x.clone());
        check_unary(|g, v| g.transpose(v), x.clone());
        check_unary(|g, v| g.sum_rows(v), x.clone());
        check_unary(|g, v| g.sum_cols(v), x.clone());
        check_unary(|g, v| g.mean(v), x.clone());
        check_unary(|g, v| g.slice_cols(v, 1, 2), x.clone());
        check_unary(|g, v| g.slice_rows(v, 1, 2), x.clone());
        check_unary(|g, v| g.reshape(v, (2, 6)), x.clone());
        let pos = x.mapv(|v| v.abs() + 0.5);
        check_unary(|g, v| g.log(v), pos.clone());
        check_unary(|g, v| g.powf(v, 2.5), pos);
    }

    #[test]
    fn binary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = rand_mat(&mut rng, 4, 5);
        let bt = rand_mat(&mut rng, 5, 4);
        let row = rand_mat(&mut rng, 1, 4).mapv(|v| v + 2.0);
        let col = rand_mat(&mut rng, 3, 1);
        let x = rand_mat(&mut rng, 3, 4);
        check_unary(
            |g, v| {
                let c = g.constant(b.clone());
                g.matmul(v, c)
            },
            x.clone(),
        );
        check_unary(
            |g, v| {
                let c = g.constant(bt.clone());
                g.matmul_nt(v, c)
            },
            x.clone(),
        );
        check_unary(
            |g, v| {
                let c = g.constant(x.clone());
                g.matmul_tn(v, c)
            },
            x.clone(),
        );
        check_unary(|g, v| g.matmul_nt(v, v), x.clone());
        check_unary(|g, v| g.mul(v, v), x.clone());
        check_unary(
            |g, v| {
                let r = g.constant(row.clone());
                g.div_row(v, r)
            },
            x.clone(),
        );
        // gradient into the broadcast operand
        check_unary(
            |g, r| {
                let a = g.constant(x.clone());
                g.div_row(a, r)
            },
            row.clone(),
        );
        check_unary(
            |g, r| {
                let a = g.constant(x.clone());
                g.mul_row(a, r)
            },
            row.clone(),
        );
        check_unary(
            |g, r| {
                let a = g.constant(x.clone());
                g.add_row(a, r)
            },
            row.clone(),
        );
        check_unary(
            |g, c| {
                let a = g.constant(x.clone());
                g.mul_col(a, c)
            },
            col,
        );
        check_unary(
            |g, v| {
                let s = g.slice_cols(v, 0, 2);
                let t = g.slice_cols(v, 2, 2);
                let c = g.concat_cols(&[t, s]);
                g.concat_rows(&[c, v])
            },
            x,
        );
    }

    #[test]
    fn gather_scatters_back_with_zero_padding() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let y = g.gather(x, (1, 4), vec![Some(3), None, Some(3), Some(0)]);
        assert_eq!(g.value(y), &array![[4.0, 0.0, 4.0, 1.0]]);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap(), &array![[1.0, 0.0], [0.0, 2.0]]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(array![[1.0, 2.0]]);
        let d = g.detach(x);
        let y = g.mul(x, d);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.get(x).unwrap(), &array![[1.0, 2.0]]);
        assert!(grads.get(d).is_none());
    }

    #[test]
    fn constants_build_no_gradient_path() {
        let mut g = Graph::new();
        let c = g.constant(array![[1.0]]);
        let e = g.exp(c);
        assert!(!g.requires_grad(e));
    }
}

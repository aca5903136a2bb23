//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Parameters
//! are borrowed from a [`ParamStore`] rather than copied, so building a graph
//! for inference costs only the activations. [`Graph::backward`] walks the
//! tape in reverse and returns per-parameter gradients.

use super::params::{GradBuffer, ParamId, ParamStore};
use super::tensor::{matmul, MatView};
use super::{Real, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Variable,
    Param(ParamId),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    SumAll(Var),
    RepeatRows(Var),
    SelectRows { x: Var, idx: Vec<usize> },
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

struct Node<T> {
    value: Value<T>,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'a, T: Real> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    params: GradBuffer<T>,
    variables: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn params(&self) -> &GradBuffer<T> {
        &self.params
    }

    pub fn into_params(self) -> GradBuffer<T> {
        self.params
    }

    /// Gradient with respect to a leaf created by [`Graph::variable`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.variables.get(v.0).and_then(|g| g.as_ref())
    }
}

fn check_same(a: &[usize], b: &[usize], what: &str) {
    assert!(a == b, "{what}: shape {a:?} vs {b:?}");
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.store.value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf whose gradient is retained and exposed via [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Variable, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) * op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let out = matmul(
            MatView::of(self.value(a), ta),
            MatView::of(self.value(b), tb),
        );
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        check_same(va.shape(), vb.shape(), "elementwise");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_raw(va.rows(), va.cols(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn row_broadcast(&mut self, a: Var, row: Var, op: Op, f: impl Fn(T, T) -> T) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert!(
            vr.rows() == 1 && vr.cols() == va.cols(),
            "row broadcast: {:?} with {:?}",
            va.shape(),
            vr.shape()
        );
        let r = vr.data();
        let c = va.cols();
        let mut data = va.data().to_vec();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, &y) in chunk.iter_mut().zip(r) {
                *x = f(*x, y);
            }
        }
        let out = Tensor::from_raw(va.rows(), c, data);
        let rg = self.rg(a) || self.rg(row);
        self.push(out, op, rg)
    }

    /// `a[n, m] + row[1, m]`, broadcasting over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, Op::AddRow(a, row), |x, y| x + y)
    }

    /// `a[n, m] * row[1, m]`, broadcasting over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        self.row_broadcast(a, row, Op::MulRow(a, row), |x, y| x * y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let st = T::lit(s);
        self.unary(a, Op::Scale(a, s), |x| x * st)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let st = T::lit(s);
        self.unary(a, Op::AddScalar(a), |x| x + st)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let st = T::lit(slope);
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * st })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let c = va.cols();
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let out = Tensor::from_raw(va.rows(), c, data);
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        if parts.len() == 1 {
            return parts[0];
        }
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(v.rows(), rows, "concat_cols: row count differs");
                data.extend_from_slice(v.row(r));
            }
        }
        let out = Tensor::from_raw(rows, total, data);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        assert!(start + len <= v.cols(), "slice_cols out of range");
        let mut data = Vec::with_capacity(v.rows() * len);
        for r in 0..v.rows() {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let out = Tensor::from_raw(v.rows(), len, data);
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    /// Arithmetic mean over rows, summed top to bottom.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (n, c) = (v.rows(), v.cols());
        let mut acc = vec![T::zero(); c];
        for r in 0..n {
            for (a, &b) in acc.iter_mut().zip(v.row(r)) {
                *a += b;
            }
        }
        let inv = T::one() / T::lit(n as f64);
        acc.iter_mut().for_each(|a| *a *= inv);
        let out = Tensor::from_raw(1, c, acc);
        let rg = self.rg(x);
        self.push(out, Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    /// Tiles a `[1, m]` row into `[n, m]`.
    pub fn repeat_rows(&mut self, x: Var, n: usize) -> Var {
        let v = self.value(x);
        assert_eq!(v.rows(), 1, "repeat_rows expects a single row");
        let mut data = Vec::with_capacity(n * v.cols());
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::from_raw(n, v.cols(), data);
        let rg = self.rg(x);
        self.push(out, Op::RepeatRows(x), rg)
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let out = self.value(x).select_rows(idx);
        let rg = self.rg(x);
        self.push(
            out,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Reverse pass from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(n);
        grads.resize_with(n, || None);
        let mut variables: Vec<Option<Tensor<T>>> = Vec::new();
        variables.resize_with(n, || None);
        let mut params = GradBuffer::empty(self.store.len());
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            match &node.op {
                Op::Input => {}
                Op::Variable => variables[i] = Some(dy),
                Op::Param(id) => params.grads[id.0] = Some(dy),
                Op::MatMul { a, b, ta, tb } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        // dA = dC * op(B)^T, transposed back when A was used transposed
                        let g = if !ta {
                            matmul(MatView::of(&dy, false), MatView::of(vb, !tb))
                        } else {
                            matmul(MatView::of(vb, *tb), MatView::of(&dy, true))
                        };
                        self.acc(&mut grads, *a, g);
                    }
                    if self.rg(*b) {
                        let g = if !tb {
                            matmul(MatView::of(va, !ta), MatView::of(&dy, false))
                        } else {
                            matmul(MatView::of(&dy, true), MatView::of(va, *ta))
                        };
                        self.acc(&mut grads, *b, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, dy.clone());
                    }
                    self.acc(&mut grads, *a, dy);
                }
                Op::Sub(a, b) => {
                    if self.rg(*b) {
                        self.acc(&mut grads, *b, dy.map(|x| -x));
                    }
                    self.acc(&mut grads, *a, dy);
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        let g = zip(&dy, self.value(*b), |d, y| d * y);
                        self.acc(&mut grads, *a, g);
                    }
                    if self.rg(*b) {
                        let g = zip(&dy, self.value(*a), |d, x| d * x);
                        self.acc(&mut grads, *b, g);
                    }
                }
                Op::AddRow(a, row) => {
                    if self.rg(*row) {
                        self.acc(&mut grads, *row, col_sums(&dy));
                    }
                    self.acc(&mut grads, *a, dy);
                }
                Op::MulRow(a, row) => {
                    let vr = self.value(*row);
                    if self.rg(*row) {
                        let prod = zip(&dy, self.value(*a), |d, x| d * x);
                        self.acc(&mut grads, *row, col_sums(&prod));
                    }
                    if self.rg(*a) {
                        let c = dy.cols();
                        let mut g = dy;
                        for chunk in g.data_mut().chunks_mut(c.max(1)) {
                            for (x, &r) in chunk.iter_mut().zip(vr.data()) {
                                *x *= r;
                            }
                        }
                        self.acc(&mut grads, *a, g);
                    }
                }
                Op::Scale(a, s) => {
                    let st = T::lit(*s);
                    self.acc(&mut grads, *a, dy.map(|d| d * st));
                }
                Op::AddScalar(a) => self.acc(&mut grads, *a, dy),
                Op::LeakyRelu(a, slope) => {
                    let st = T::lit(*slope);
                    let g = zip(&dy, self.value(*a), |d, x| if x > T::zero() { d } else { d * st });
                    self.acc(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let y = self.value(Var(i));
                    let g = zip(&dy, y, |d, s| d * s * (T::one() - s));
                    self.acc(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let y = self.value(Var(i));
                    let g = zip(&dy, y, |d, t| d * (T::one() - t * t));
                    self.acc(&mut grads, *a, g);
                }
                Op::Exp(a) => {
                    let y = self.value(Var(i));
                    let g = zip(&dy, y, |d, e| d * e);
                    self.acc(&mut grads, *a, g);
                }
                Op::Square(a) => {
                    let two = T::lit(2.0);
                    let g = zip(&dy, self.value(*a), |d, x| two * x * d);
                    self.acc(&mut grads, *a, g);
                }
                Op::SoftmaxRows(a) => {
                    let y = self.value(Var(i));
                    let c = y.cols();
                    let mut g = dy;
                    for (grow, yrow) in g.data_mut().chunks_mut(c.max(1)).zip(y.data().chunks(c.max(1))) {
                        let dot: T = grow.iter().zip(yrow).map(|(&d, &s)| d * s).sum();
                        for (d, &s) in grow.iter_mut().zip(yrow) {
                            *d = s * (*d - dot);
                        }
                    }
                    self.acc(&mut grads, *a, g);
                }
                Op::ConcatCols(parts) => {
                    let rows = dy.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            let mut data = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                data.extend_from_slice(&dy.row(r)[offset..offset + w]);
                            }
                            self.acc(&mut grads, p, Tensor::from_raw(rows, w, data));
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let vx = self.value(*x);
                    let mut g = Tensor::zeros(&[vx.rows(), vx.cols()]);
                    let w = dy.cols();
                    for r in 0..dy.rows() {
                        g.row_mut(r)[*start..*start + w].copy_from_slice(dy.row(r));
                    }
                    self.acc(&mut grads, *x, g);
                }
                Op::MeanRows(x) => {
                    let n = self.value(*x).rows();
                    let inv = T::one() / T::lit(n as f64);
                    let row: Vec<T> = dy.data().iter().map(|&d| d * inv).collect();
                    let mut data = Vec::with_capacity(n * row.len());
                    for _ in 0..n {
                        data.extend_from_slice(&row);
                    }
                    self.acc(&mut grads, *x, Tensor::from_raw(n, row.len(), data));
                }
                Op::SumAll(x) => {
                    let vx = self.value(*x);
                    let g = Tensor::from_raw(vx.rows(), vx.cols(), vec![dy.item(); vx.len()]);
                    self.acc(&mut grads, *x, g);
                }
                Op::RepeatRows(x) => self.acc(&mut grads, *x, col_sums(&dy)),
                Op::SelectRows { x, idx } => {
                    let vx = self.value(*x);
                    let mut g = Tensor::zeros(&[vx.rows(), vx.cols()]);
                    for (r, &src) in idx.iter().enumerate() {
                        for (a, &b) in g.row_mut(src).iter_mut().zip(dy.row(r)) {
                            *a += b;
                        }
                    }
                    self.acc(&mut grads, *x, g);
                }
            }
        }
        Gradients { params, variables }
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|x| *x *= inv);
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_raw(a.rows(), a.cols(), data)
}

fn col_sums<T: Real>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.cols();
    let mut acc = vec![T::zero(); c];
    for r in 0..t.rows() {
        for (a, &b) in acc.iter_mut().zip(t.row(r)) {
            *a += b;
        }
    }
    Tensor::from_raw(1, c, acc)
}

//! Reverse-mode tape over batched row-major matrices.
//!
//! Each node holds a `rows × cols` value; batch rows flow through the same
//! node. The backward pass walks nodes in reverse push order, which is a
//! reverse topological order because inputs always precede their consumers.

use crate::autodiff::params::ParamStore;
use crate::error::{Error, Result};
use crate::linalg::{dot, Matrix};
use crate::nn::Activation;
use crate::scalar::Real;

pub type NodeId = usize;

#[derive(Clone, Debug)]
pub enum Op<T> {
    Const,
    Param { index: usize },
    /// `x · wᵀ + b` with `w: out × in` and `b: 1 × out`.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Activation { x: NodeId, kind: Activation },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    /// Multiplies row `i` by `scale[i]`.
    RowScale { x: NodeId, scale: Vec<T> },
    Scale { x: NodeId, factor: T },
    /// Column-wise concatenation.
    Concat { parts: Vec<NodeId> },
    Square { x: NodeId },
    Sin { x: NodeId },
    Cos { x: NodeId },
    Sum { x: NodeId },
    Mean { x: NodeId },
    /// Forwards the value, blocks the adjoint.
    StopGrad { x: NodeId },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param { .. } => "param",
            Op::Affine { .. } => "affine",
            Op::Activation { .. } => "activation",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::RowScale { .. } => "row_scale",
            Op::Scale { .. } => "scale",
            Op::Concat { .. } => "concat",
            Op::Square { .. } => "square",
            Op::Sin { .. } => "sin",
            Op::Cos { .. } => "cos",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::StopGrad { .. } => "stop_grad",
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    name: String,
    op: Op<T>,
    value: Matrix<T>,
}

pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    first_non_finite: Option<NodeId>,
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            first_non_finite: None,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<T> {
        &self.nodes[id].value
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id].name
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> T {
        let v = &self.nodes[id].value;
        debug_assert_eq!(v.shape(), (1, 1));
        v.data()[0]
    }

    fn push(&mut self, name: String, op: Op<T>, value: Matrix<T>) -> NodeId {
        let id = self.nodes.len();
        if self.first_non_finite.is_none() && !value.all_finite() {
            self.first_non_finite = Some(id);
        }
        self.nodes.push(Node { name, op, value });
        id
    }

    fn record(&mut self, op: Op<T>) -> NodeId {
        let value = self.compute(&op, None);
        let name = match &op {
            Op::Affine { w, .. } => format!("affine({})", self.nodes[*w].name),
            other => other.kind().to_string(),
        };
        self.push(name, op, value)
    }

    pub fn constant(&mut self, value: Matrix<T>) -> NodeId {
        self.push("const".into(), Op::Const, value)
    }

    /// Brings a named parameter tensor onto the tape. 1-D tensors become a
    /// single row.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let index = self
            .params
            .index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown tensor `{name}`")))?;
        let op = Op::Param { index };
        let value = self.compute(&op, None);
        Ok(self.push(name.to_string(), op, value))
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (_, xin) = self.value(x).shape();
        let (wout, win) = self.value(w).shape();
        assert_eq!(xin, win, "affine: input width");
        assert_eq!(self.value(b).shape(), (1, wout), "affine: bias shape");
        self.record(Op::Affine { x, w, b })
    }

    pub fn activation(&mut self, x: NodeId, kind: Activation) -> NodeId {
        self.record(Op::Activation { x, kind })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add: shapes");
        self.record(Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub: shapes");
        self.record(Op::Sub { a, b })
    }

    pub fn row_scale(&mut self, x: NodeId, scale: Vec<T>) -> NodeId {
        assert_eq!(self.value(x).rows(), scale.len(), "row_scale: rows");
        self.record(Op::RowScale { x, scale })
    }

    pub fn scale(&mut self, x: NodeId, factor: T) -> NodeId {
        self.record(Op::Scale { x, factor })
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let rows = self.value(parts[0]).rows();
        assert!(parts.iter().all(|&p| self.value(p).rows() == rows), "concat: rows");
        self.record(Op::Concat {
            parts: parts.to_vec(),
        })
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Square { x })
    }

    pub fn sin(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Sin { x })
    }

    pub fn cos(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Cos { x })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Sum { x })
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.record(Op::Mean { x })
    }

    pub fn stop_grad(&mut self, x: NodeId) -> NodeId {
        self.record(Op::StopGrad { x })
    }

    fn input<'a>(&'a self, id: NodeId, replayed: Option<&'a [Matrix<T>]>) -> &'a Matrix<T> {
        match replayed {
            Some(vals) => &vals[id],
            None => &self.nodes[id].value,
        }
    }

    fn compute(&self, op: &Op<T>, replayed: Option<&[Matrix<T>]>) -> Matrix<T> {
        let get = |id: NodeId| self.input(id, replayed);
        match op {
            Op::Const => unreachable!("constants carry their own value"),
            Op::Param { index } => {
                let spec = &self.params.layout()[*index];
                let data = self.params.values()[self.params.range(*index)].to_vec();
                match spec.shape.as_slice() {
                    [n] => Matrix::from_vec(1, *n, data),
                    [r, c] => Matrix::from_vec(*r, *c, data),
                    _ => Matrix::from_vec(1, data.len(), data),
                }
            }
            Op::Affine { x, w, b } => {
                let (x, w, b) = (get(*x), get(*w), get(*b));
                let (rows, out) = (x.rows(), w.rows());
                let mut y = Matrix::zeros(rows, out);
                for i in 0..rows {
                    let xr = x.row(i);
                    let yr = y.row_mut(i);
                    for (o, yo) in yr.iter_mut().enumerate() {
                        *yo = dot(w.row(o), xr) + b.data()[o];
                    }
                }
                y
            }
            Op::Activation { x, kind } => get(*x).map(|v| kind.eval(v)),
            Op::Add { a, b } => zip_map(get(*a), get(*b), |p, q| p + q),
            Op::Sub { a, b } => zip_map(get(*a), get(*b), |p, q| p - q),
            Op::RowScale { x, scale } => {
                let mut y = get(*x).clone();
                for (i, &s) in scale.iter().enumerate() {
                    y.row_mut(i).iter_mut().for_each(|v| *v = *v * s);
                }
                y
            }
            Op::Scale { x, factor } => get(*x).map(|v| v * *factor),
            Op::Concat { parts } => {
                let rows = get(parts[0]).rows();
                let cols: usize = parts.iter().map(|&p| get(p).cols()).sum();
                let mut y = Matrix::zeros(rows, cols);
                for i in 0..rows {
                    let mut at = 0;
                    for &p in parts {
                        let src = get(p).row(i);
                        y.row_mut(i)[at..at + src.len()].copy_from_slice(src);
                        at += src.len();
                    }
                }
                y
            }
            Op::Square { x } => get(*x).map(|v| v * v),
            Op::Sin { x } => get(*x).map(|v| v.sin()),
            Op::Cos { x } => get(*x).map(|v| v.cos()),
            Op::Sum { x } => {
                let s = get(*x).data().iter().fold(T::zero(), |acc, &v| acc + v);
                Matrix::from_vec(1, 1, vec![s])
            }
            Op::Mean { x } => {
                let v = get(*x);
                let s = v.data().iter().fold(T::zero(), |acc, &e| acc + e);
                Matrix::from_vec(1, 1, vec![s / T::of_usize(v.data().len())])
            }
            Op::StopGrad { x } => get(*x).clone(),
        }
    }

    /// Recomputes every node from its recorded op.
    pub fn replay(&self) -> Vec<Matrix<T>> {
        let mut vals: Vec<Matrix<T>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = match node.op {
                Op::Const => node.value.clone(),
                ref op => self.compute(op, Some(&vals)),
            };
            vals.push(v);
        }
        vals
    }

    /// Gradient of the `1 × 1` node `loss` with respect to every parameter in
    /// the store.
    pub fn backward(&self, loss: NodeId) -> Result<Vec<T>> {
        if let Some(bad) = self.first_non_finite.filter(|&b| b <= loss) {
            return Err(Error::NonFinite {
                node: self.nodes[bad].name.clone(),
            });
        }
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::InvalidArgument(format!(
                "backward from non-scalar node `{}`",
                self.nodes[loss].name
            )));
        }
        let mut grad = vec![T::zero(); self.params.len()];
        let mut adj: Vec<Option<Matrix<T>>> = vec![None; loss + 1];
        adj[loss] = Some(Matrix::from_vec(1, 1, vec![T::one()]));

        for id in (0..=loss).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    node: format!("adjoint of {}", self.nodes[id].name),
                });
            }
            match &self.nodes[id].op {
                Op::Const | Op::StopGrad { .. } => {}
                Op::Param { index } => {
                    let r = self.params.range(*index);
                    for (acc, &v) in grad[r].iter_mut().zip(g.data()) {
                        *acc += v;
                    }
                }
                Op::Affine { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (rows, inw, out) = (xv.rows(), xv.cols(), wv.rows());
                    let mut dx = Matrix::zeros(rows, inw);
                    let mut dw = Matrix::zeros(out, inw);
                    let mut db = Matrix::zeros(1, out);
                    for i in 0..rows {
                        let gr = g.row(i);
                        let xr = xv.row(i);
                        for o in 0..out {
                            let go = gr[o];
                            if go == T::zero() {
                                continue;
                            }
                            db.data_mut()[o] += go;
                            let wr = wv.row(o);
                            let dxr = dx.row_mut(i);
                            for k in 0..inw {
                                dxr[k] += go * wr[k];
                            }
                            let dwr = dw.row_mut(o);
                            for k in 0..inw {
                                dwr[k] += go * xr[k];
                            }
                        }
                    }
                    accumulate(&mut adj, *x, dx);
                    accumulate(&mut adj, *w, dw);
                    accumulate(&mut adj, *b, db);
                }
                Op::Activation { x, kind } => {
                    let xv = self.value(*x);
                    accumulate(&mut adj, *x, zip_map(&g, xv, |d, v| d * kind.deriv(v)));
                }
                Op::Add { a, b } => {
                    accumulate(&mut adj, *a, g.clone());
                    accumulate(&mut adj, *b, g);
                }
                Op::Sub { a, b } => {
                    accumulate(&mut adj, *b, g.map(|v| -v));
                    accumulate(&mut adj, *a, g);
                }
                Op::RowScale { x, scale } => {
                    let mut dx = g;
                    for (i, &s) in scale.iter().enumerate() {
                        dx.row_mut(i).iter_mut().for_each(|v| *v = *v * s);
                    }
                    accumulate(&mut adj, *x, dx);
                }
                Op::Scale { x, factor } => {
                    let f = *factor;
                    accumulate(&mut adj, *x, g.map(|v| v * f));
                }
                Op::Concat { parts } => {
                    let mut at = 0;
                    for &p in parts {
                        let (rows, cols) = self.value(p).shape();
                        let mut dp = Matrix::zeros(rows, cols);
                        for i in 0..rows {
                            dp.row_mut(i).copy_from_slice(&g.row(i)[at..at + cols]);
                        }
                        at += cols;
                        accumulate(&mut adj, p, dp);
                    }
                }
                Op::Square { x } => {
                    let two = T::of(2.0);
                    accumulate(&mut adj, *x, zip_map(&g, self.value(*x), |d, v| d * two * v));
                }
                Op::Sin { x } => {
                    accumulate(&mut adj, *x, zip_map(&g, self.value(*x), |d, v| d * v.cos()));
                }
                Op::Cos { x } => {
                    accumulate(&mut adj, *x, zip_map(&g, self.value(*x), |d, v| -(d * v.sin())));
                }
                Op::Sum { x } => {
                    let d = g.data()[0];
                    accumulate(&mut adj, *x, self.value(*x).map(|_| d));
                }
                Op::Mean { x } => {
                    let xv = self.value(*x);
                    let d = g.data()[0] / T::of_usize(xv.data().len());
                    accumulate(&mut adj, *x, xv.map(|_| d));
                }
            }
        }
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                node: "parameter gradient".into(),
            });
        }
        Ok(grad)
    }
}

fn zip_map<T: Real>(a: &Matrix<T>, b: &Matrix<T>, f: impl Fn(T, T) -> T) -> Matrix<T> {
    assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

fn accumulate<T: Real>(adj: &mut [Option<Matrix<T>>], id: NodeId, g: Matrix<T>) {
    match &mut adj[id] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += *v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

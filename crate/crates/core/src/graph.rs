//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in insertion order, which is also a
//! topological order, so the backward pass is a single reverse sweep.
//! Parameters are read by reference from a [`ParamStore`]; the graph never
//! copies them. Vectors are `[1, n]` rows and scalars are `[1, 1]`.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm_a_bt_acc, gemm_acc, gemm_at_b_acc, sigmoid, Real, Tensor};

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` before the logs.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Gather { table: ParamId, ids: Vec<usize> },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    ScaleBy { scalar: NodeId, x: NodeId },
    Blend { weight: NodeId, a: NodeId, b: NodeId },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    BroadcastRows(NodeId),
    SelectRow(NodeId, usize),
    Transpose(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Softmax(NodeId),
    Bce { prob: NodeId, label: T },
    Sum(NodeId),
}

struct Node<T> {
    op: Op<T>,
    /// `None` only for parameter nodes, whose value lives in the store.
    value: Option<Tensor<T>>,
    needs_grad: bool,
}

/// Gradient of one parameter: dense, or sparse rows for embedding gathers.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamGrad<T> {
    Dense(Tensor<T>),
    Rows {
        shape: Vec<usize>,
        rows: BTreeMap<usize, Vec<T>>,
    },
}

impl<T: Real> ParamGrad<T> {
    pub fn to_dense(&self) -> Tensor<T> {
        match self {
            ParamGrad::Dense(t) => t.clone(),
            ParamGrad::Rows { shape, rows } => {
                let mut t = Tensor::zeros(shape.clone());
                let cols = t.cols();
                for (&r, vals) in rows {
                    t.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(vals);
                }
                t
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            ParamGrad::Dense(t) => t.is_finite(),
            ParamGrad::Rows { rows, .. } => rows.values().flatten().all(|v| v.is_finite()),
        }
    }

    fn add(&mut self, other: &ParamGrad<T>) {
        match (self, other) {
            (ParamGrad::Dense(a), ParamGrad::Dense(b)) => a.add_assign(b),
            (ParamGrad::Rows { rows: a, .. }, ParamGrad::Rows { rows: b, .. }) => {
                for (&r, vals) in b {
                    add_row(a, r, vals);
                }
            }
            (this @ ParamGrad::Rows { .. }, other) => {
                let mut dense = this.to_dense();
                dense.add_assign(&other.to_dense());
                *this = ParamGrad::Dense(dense);
            }
            (ParamGrad::Dense(a), other) => a.add_assign(&other.to_dense()),
        }
    }

    fn scale(&mut self, f: T) {
        match self {
            ParamGrad::Dense(t) => t.scale_assign(f),
            ParamGrad::Rows { rows, .. } => {
                for v in rows.values_mut().flatten() {
                    *v = *v * f;
                }
            }
        }
    }
}

fn add_row<T: Real>(rows: &mut BTreeMap<usize, Vec<T>>, r: usize, vals: &[T]) {
    match rows.get_mut(&r) {
        Some(acc) => {
            for (a, &v) in acc.iter_mut().zip(vals) {
                *a = *a + v;
            }
        }
        None => {
            rows.insert(r, vals.to_vec());
        }
    }
}

/// Parameter gradients indexed by [`ParamId`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Option<ParamGrad<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&ParamGrad<T>> {
        self.grads.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Dense view of a gradient, zeros when the parameter was not reached.
    pub fn dense(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        match self.get(id) {
            Some(g) => g.to_dense(),
            None => Tensor::zeros(store.get(id).shape().to_vec()),
        }
    }

    pub fn set(&mut self, id: ParamId, grad: ParamGrad<T>) {
        if self.grads.len() <= id.index() {
            self.grads.resize(id.index() + 1, None);
        }
        self.grads[id.index()] = Some(grad);
    }

    pub fn accumulate(&mut self, other: &Gradients<T>) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (_, None) => {}
                (None, Some(g)) => *mine = Some(g.clone()),
                (Some(m), Some(g)) => m.add(g),
            }
        }
    }

    pub fn scale(&mut self, f: T) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(f);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamGrad<T>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

pub struct Graph<'a, T> {
    store: &'a ParamStore<T>,
    nodes: Vec<Node<T>>,
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::with_capacity(64),
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

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.store.get(*p),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    /// First element of a node's value; meant for `[1, 1]` nodes.
    pub fn scalar(&self, id: NodeId) -> T {
        self.value(id).data()[0]
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.value(id).shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, inputs: &[NodeId]) -> NodeId {
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn mismatch(&self, op: &'static str, a: NodeId, b: NodeId) -> Error {
        Error::ShapeMismatch {
            op,
            left: self.shape(a).to_vec(),
            right: self.shape(b).to_vec(),
        }
    }

    /// A constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Input,
            value: Some(value),
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn row(&mut self, values: Vec<T>) -> NodeId {
        self.input(Tensor::row(values))
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Rows `ids` of a `[vocab, d]` table, as an `[ids.len(), d]` matrix.
    pub fn gather(&mut self, table: ParamId, ids: &[usize]) -> Result<NodeId> {
        let t = self.store.get(table);
        let (vocab, d) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::OutOfVocabulary { id, vocab });
            }
            data.extend_from_slice(t.row_slice(id));
        }
        let value = Tensor::matrix(ids.len(), d, data)?;
        self.nodes.push(Node {
            op: Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            value: Some(value),
            needs_grad: true,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.cols() != bv.rows() {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.cols());
        let mut out = vec![T::zero(); m * n];
        gemm_acc(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(Op::MatMul(a, b), value, &[a, b]))
    }

    fn binary_broadcast(
        &self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() == bv.shape() {
            let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(av.shape().to_vec(), data);
        }
        // Bias-style broadcast: [m, n] with [1, n].
        if av.shape().len() == 2 && bv.shape() == [1, av.cols()] {
            let n = av.cols();
            let data = av
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, bv.data()[i % n]))
                .collect();
            return Tensor::new(av.shape().to_vec(), data);
        }
        Err(self.mismatch(op, a, b))
    }

    /// Elementwise sum; `b` may also be a `[1, n]` row added to every row of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        Ok(self.push(Op::Add(a, b), value, &[a, b]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        Ok(self.push(Op::Sub(a, b), value, &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("mul", a, b));
        }
        let value = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        Ok(self.push(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale(a, factor), value, &[a])
    }

    /// `scalar * x` where `scalar` is a `[1, 1]` node.
    pub fn scale_by(&mut self, scalar: NodeId, x: NodeId) -> Result<NodeId> {
        if self.value(scalar).numel() != 1 {
            return Err(self.mismatch("scale_by", scalar, x));
        }
        let s = self.scalar(scalar);
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| s * v).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(Op::ScaleBy { scalar, x }, value, &[scalar, x]))
    }

    /// Scalar-affine combination `w * a + (1 - w) * b` with `w` a `[1, 1]` node.
    pub fn blend(&mut self, weight: NodeId, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(weight).numel() != 1 {
            return Err(self.mismatch("blend", weight, a));
        }
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("blend", a, b));
        }
        let w = self.scalar(weight);
        let (av, bv) = (self.value(a), self.value(b));
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| w * x + (T::one() - w) * y)
            .collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(Op::Blend { weight, a, b }, value, &[weight, a, b]))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = self.value(parts[0]).rows();
        for &p in parts {
            if self.shape(p).len() != 2 || self.value(p).rows() != rows {
                return Err(self.mismatch("concat_cols", parts[0], p));
            }
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let value = Tensor::matrix(rows, total, data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, parts))
    }

    /// Vertical stacking of matrices with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = self.value(parts[0]).cols();
        for &p in parts {
            if self.shape(p).len() != 2 || self.value(p).cols() != cols {
                return Err(self.mismatch("concat_rows", parts[0], p));
            }
        }
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
            rows += self.value(p).rows();
        }
        let value = Tensor::matrix(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, parts))
    }

    /// Repeat a `[1, n]` row `times` times.
    pub fn broadcast_rows(&mut self, a: NodeId, times: usize) -> Result<NodeId> {
        let av = self.value(a);
        if av.shape().len() != 2 || av.rows() != 1 {
            return Err(Error::ShapeMismatch {
                op: "broadcast_rows",
                left: av.shape().to_vec(),
                right: vec![times, av.cols()],
            });
        }
        let n = av.cols();
        let data = av.data().repeat(times);
        let value = Tensor::matrix(times, n, data)?;
        Ok(self.push(Op::BroadcastRows(a), value, &[a]))
    }

    pub fn select_row(&mut self, a: NodeId, r: usize) -> Result<NodeId> {
        let av = self.value(a);
        if r >= av.rows() {
            return Err(Error::ShapeMismatch {
                op: "select_row",
                left: av.shape().to_vec(),
                right: vec![r],
            });
        }
        let value = Tensor::row(av.row_slice(r).to_vec());
        Ok(self.push(Op::SelectRow(a, r), value, &[a]))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = av.data()[i * n + j];
            }
        }
        let value = Tensor::matrix(n, m, data).expect("transpose shape");
        self.push(Op::Transpose(a), value, &[a])
    }

    fn unary(&mut self, a: NodeId, op: Op<T>, f: impl Fn(T) -> T) -> NodeId {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(op, value, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), |x| x.tanh())
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let (m, n) = (av.rows(), av.cols());
        let mut data = av.data().to_vec();
        for r in 0..m {
            let row = &mut data[r * n..(r + 1) * n];
            let max = row.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
            let mut total = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total = total + *v;
            }
            for v in row.iter_mut() {
                *v = *v / total;
            }
        }
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        self.push(Op::Softmax(a), value, &[a])
    }

    /// Binary cross-entropy of a `[1, 1]` probability node against `label`.
    pub fn bce(&mut self, prob: NodeId, label: T) -> Result<NodeId> {
        if label != T::zero() && label != T::one() {
            return Err(Error::InvalidLabel(label.as_f64()));
        }
        let pv = self.value(prob);
        if pv.numel() != 1 {
            return Err(Error::NonScalarLoss(pv.shape().to_vec()));
        }
        let loss = bce_value(pv.data()[0], label);
        Ok(self.push(Op::Bce { prob, label }, Tensor::scalar(loss), &[prob]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total = self.value(a).data().iter().copied().sum();
        self.push(Op::Sum(a), Tensor::scalar(total), &[a])
    }

    /// Reverse sweep from a scalar `loss`, returning parameter gradients.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), T::one()));
        let mut out = Gradients::empty(self.store.len());

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    let pg = ParamGrad::Dense(g);
                    match out.grads[p.index()].as_mut() {
                        Some(acc) => acc.add(&pg),
                        None => out.grads[p.index()] = Some(pg),
                    }
                }
                Op::Gather { table, ids } => {
                    let d = g.cols();
                    let shape = self.store.get(*table).shape().to_vec();
                    let slot = out.grads[table.index()].get_or_insert_with(|| ParamGrad::Rows {
                        shape,
                        rows: BTreeMap::new(),
                    });
                    for (j, &id) in ids.iter().enumerate() {
                        let vals = &g.data()[j * d..(j + 1) * d];
                        match slot {
                            ParamGrad::Rows { rows, .. } => add_row(rows, id, vals),
                            ParamGrad::Dense(t) => {
                                for (a, &v) in t.data_mut()[id * d..(id + 1) * d].iter_mut().zip(vals)
                                {
                                    *a = *a + v;
                                }
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.cols());
                    if self.wants(*a) {
                        let mut da = vec![T::zero(); m * k];
                        gemm_a_bt_acc(g.data(), bv.data(), &mut da, m, n, k);
                        self.acc(&mut grads, *a, Tensor::matrix(m, k, da)?);
                    }
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); k * n];
                        gemm_at_b_acc(av.data(), g.data(), &mut db, m, k, n);
                        self.acc(&mut grads, *b, Tensor::matrix(k, n, db)?);
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let negate = matches!(node.op, Op::Sub(..));
                    if self.wants(*b) {
                        let mut gb = if self.shape(*b) == g.shape() {
                            g.clone()
                        } else {
                            column_sums(&g)
                        };
                        if negate {
                            gb.scale_assign(-T::one());
                        }
                        self.acc(&mut grads, *b, gb);
                    }
                    if self.wants(*a) {
                        self.acc(&mut grads, *a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.wants(*a) {
                        let ga = zip_map(&g, self.value(*b), |x, y| x * y);
                        self.acc(&mut grads, *a, ga);
                    }
                    if self.wants(*b) {
                        let gb = zip_map(&g, self.value(*a), |x, y| x * y);
                        self.acc(&mut grads, *b, gb);
                    }
                }
                Op::Scale(a, f) => {
                    let mut ga = g;
                    ga.scale_assign(*f);
                    self.acc(&mut grads, *a, ga);
                }
                Op::ScaleBy { scalar, x } => {
                    let s = self.scalar(*scalar);
                    if self.wants(*scalar) {
                        let ds: T = dot(g.data(), self.value(*x).data());
                        self.acc(&mut grads, *scalar, Tensor::scalar(ds));
                    }
                    if self.wants(*x) {
                        let mut gx = g;
                        gx.scale_assign(s);
                        self.acc(&mut grads, *x, gx);
                    }
                }
                Op::Blend { weight, a, b } => {
                    let w = self.scalar(*weight);
                    if self.wants(*weight) {
                        let diff = zip_map(self.value(*a), self.value(*b), |x, y| x - y);
                        let dw = dot(g.data(), diff.data());
                        self.acc(&mut grads, *weight, Tensor::scalar(dw));
                    }
                    if self.wants(*b) {
                        let mut gb = g.clone();
                        gb.scale_assign(T::one() - w);
                        self.acc(&mut grads, *b, gb);
                    }
                    if self.wants(*a) {
                        let mut ga = g;
                        ga.scale_assign(w);
                        self.acc(&mut grads, *a, ga);
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = g.rows();
                    let total = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.wants(p) {
                            let mut data = Vec::with_capacity(rows * w);
                            for r in 0..rows {
                                data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                            }
                            self.acc(&mut grads, p, Tensor::matrix(rows, w, data)?);
                        }
                        offset += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let cols = g.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        if self.wants(p) {
                            let data = g.data()[offset * cols..(offset + r) * cols].to_vec();
                            self.acc(&mut grads, p, Tensor::matrix(r, cols, data)?);
                        }
                        offset += r;
                    }
                }
                Op::BroadcastRows(a) => {
                    self.acc(&mut grads, *a, column_sums(&g));
                }
                Op::SelectRow(a, r) => {
                    let av = self.value(*a);
                    let mut ga = Tensor::zeros(av.shape().to_vec());
                    let n = av.cols();
                    ga.data_mut()[r * n..(r + 1) * n].copy_from_slice(g.data());
                    self.acc(&mut grads, *a, ga);
                }
                Op::Transpose(a) => {
                    let (m, n) = (g.rows(), g.cols());
                    let mut data = vec![T::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            data[j * m + i] = g.data()[i * n + j];
                        }
                    }
                    self.acc(&mut grads, *a, Tensor::matrix(n, m, data)?);
                }
                Op::Sigmoid(a) => {
                    let y = node.value.as_ref().expect("computed");
                    let ga = zip_map(&g, y, |gv, yv| gv * yv * (T::one() - yv));
                    self.acc(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = node.value.as_ref().expect("computed");
                    let ga = zip_map(&g, y, |gv, yv| gv * (T::one() - yv * yv));
                    self.acc(&mut grads, *a, ga);
                }
                Op::Relu(a) => {
                    let ga = zip_map(&g, self.value(*a), |gv, xv| {
                        if xv > T::zero() {
                            gv
                        } else {
                            T::zero()
                        }
                    });
                    self.acc(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let y = node.value.as_ref().expect("computed");
                    let (m, n) = (y.rows(), y.cols());
                    let mut data = vec![T::zero(); m * n];
                    for r in 0..m {
                        let yr = &y.data()[r * n..(r + 1) * n];
                        let gr = &g.data()[r * n..(r + 1) * n];
                        let inner = dot(yr, gr);
                        for j in 0..n {
                            data[r * n + j] = yr[j] * (gr[j] - inner);
                        }
                    }
                    self.acc(&mut grads, *a, Tensor::new(y.shape().to_vec(), data)?);
                }
                Op::Bce { prob, label } => {
                    let p = self.scalar(*prob);
                    let d = bce_derivative(p, *label) * g.data()[0];
                    let shape = self.shape(*prob).to_vec();
                    self.acc(&mut grads, *prob, Tensor::full(shape, d));
                }
                Op::Sum(a) => {
                    let shape = self.shape(*a).to_vec();
                    self.acc(&mut grads, *a, Tensor::full(shape, g.data()[0]));
                }
            }
        }
        Ok(out)
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, g: Tensor<T>) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match grads[id.0].as_mut() {
            Some(existing) => existing.add_assign(&g),
            None => grads[id.0] = Some(g),
        }
    }
}

/// Clamped binary cross-entropy value.
pub fn bce_value<T: Real>(p: T, label: T) -> T {
    let lo = T::lit(BCE_CLAMP);
    let hi = T::one() - lo;
    let pc = p.max(lo).min(hi);
    -(label * pc.ln() + (T::one() - label) * (T::one() - pc).ln())
}

fn bce_derivative<T: Real>(p: T, label: T) -> T {
    let lo = T::lit(BCE_CLAMP);
    if p < lo || p > T::one() - lo {
        return T::zero();
    }
    -label / p + (T::one() - label) / (T::one() - p)
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn column_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let n = g.cols();
    let mut out = vec![T::zero(); n];
    for r in 0..g.rows() {
        for (o, &v) in out.iter_mut().zip(g.row_slice(r)) {
            *o = *o + v;
        }
    }
    Tensor::row(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, t)| store.add(*n, t.clone(), true))
            .collect();
        (store, ids)
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::scalar(0.0));
        let y = g.sigmoid(x);
        assert_eq!(g.scalar(y), 0.5);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.row(vec![3.7, 3.7]);
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_matmul_returns_input() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let eye = g.input(
            Tensor::matrix(3, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let x = g.input(Tensor::matrix(3, 1, vec![1.5, -2.0, 0.25]).unwrap());
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, -2.0, 0.25]);
    }

    #[test]
    fn matmul_shape_mismatch_names_shapes() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let a = g.input(Tensor::zeros(vec![2, 3]));
        let b = g.input(Tensor::zeros(vec![2, 3]));
        match g.matmul(a, b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![2, 3]);
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn square_gradient() {
        let (store, ids) = store_with(&[("x", Tensor::scalar(3.0))]);
        let mut g = Graph::new(&store);
        let x = g.param(ids[0]);
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.dense(&store, ids[0]).data(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (store, ids) = store_with(&[("w", Tensor::row(vec![1.0, 2.0]))]);
        let mut g = Graph::new(&store);
        let w = g.param(ids[0]);
        let zero = g.scale(w, 0.0);
        let c = g.row(vec![5.0, 5.0]);
        let s = g.add(zero, c).unwrap();
        let loss = g.sum(s);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.dense(&store, ids[0]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let (store, ids) = store_with(&[("w", Tensor::row(vec![1.0, 2.0]))]);
        let mut g = Graph::new(&store);
        let w = g.param(ids[0]);
        assert!(matches!(g.backward(w), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn inputs_never_receive_gradients() {
        let (store, ids) = store_with(&[("w", Tensor::row(vec![0.5, -0.5]))]);
        let mut g = Graph::new(&store);
        let w = g.param(ids[0]);
        let x = g.row(vec![2.0, 3.0]);
        let y = g.mul(w, x).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.iter().count(), 1);
        assert_eq!(grads.dense(&store, ids[0]).data(), &[2.0, 3.0]);
    }

    #[test]
    fn repeated_gather_sums_row_gradients() {
        let table = Tensor::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let (store, ids) = store_with(&[("emb", table)]);
        let mut g = Graph::new(&store);
        let rows = g.gather(ids[0], &[1, 1]).unwrap();
        assert_eq!(g.value(rows).data(), &[3.0, 4.0, 3.0, 4.0]);
        let w = g.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 10.0, 20.0]).unwrap());
        let y = g.mul(rows, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        match grads.get(ids[0]).unwrap() {
            ParamGrad::Rows { rows, .. } => {
                assert_eq!(rows.len(), 1);
                assert_eq!(rows[&1], vec![11.0, 22.0]);
            }
            other => panic!("expected sparse rows, got {other:?}"),
        }
    }

    #[test]
    fn gather_out_of_vocabulary() {
        let (store, ids) = store_with(&[("emb", Tensor::zeros(vec![3, 2]))]);
        let mut g = Graph::new(&store);
        assert_eq!(
            g.gather(ids[0], &[0, 3]),
            Err(Error::OutOfVocabulary { id: 3, vocab: 3 })
        );
        let empty = g.gather(ids[0], &[]).unwrap();
        assert_eq!(g.value(empty).shape(), &[0, 2]);
    }

    #[test]
    fn bce_logit_gradient_is_prediction_minus_label() {
        for &(logit, label) in &[(0.3, 1.0), (-1.7, 0.0), (2.5, 0.0), (-0.1, 1.0)] {
            let (store, ids) = store_with(&[("z", Tensor::scalar(logit))]);
            let mut g = Graph::new(&store);
            let z = g.param(ids[0]);
            let p = g.sigmoid(z);
            let loss = g.bce(p, label).unwrap();
            let grads = g.backward(loss).unwrap();
            let got = grads.dense(&store, ids[0]).data()[0];
            assert!((got - (g.scalar(p) - label)).abs() < 1e-10);
        }
    }

    #[test]
    fn bce_rejects_soft_labels() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let p = g.input(Tensor::scalar(0.5));
        assert_eq!(g.bce(p, 0.5), Err(Error::InvalidLabel(0.5)));
    }

    #[test]
    fn add_broadcasts_bias_rows_only() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let m = g.input(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = g.row(vec![10.0, 20.0]);
        let y = g.add(m, b).unwrap();
        assert_eq!(g.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let col = g.input(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        assert!(g.add(m, col).is_err());
    }
}

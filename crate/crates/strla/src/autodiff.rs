//! Reverse-mode automatic differentiation over a dynamic tape.
//!
//! Each training example gets its own tape whose topology mirrors the input
//! tree. Values are 64-bit dense matrices with vectors as (n, 1). A parameter
//! used at many tree positions is inserted as one leaf (deduplicated by
//! [`ParamKey`]) so its gradient accumulates across uses — that is
//! backpropagation through structure.

use std::collections::HashMap;
use std::sync::Arc;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: (usize, usize), rhs: (usize, usize) },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("backward requires a scalar loss node, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("label index {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
}

type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major f64 matrix; vectors are (n, 1).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "data length must equal rows*cols");
        Tensor { rows, cols, data }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor { rows: data.len(), cols: 1, data }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor { rows: 1, cols: 1, data: vec![x] }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }
}

/// Identifies a parameter tensor: (group id, slot within the group).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamKey {
    pub group: u32,
    pub slot: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(u32);

impl NodeId {
    fn idx(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug)]
enum Op {
    /// Input leaf: a trainable parameter (tracked via the tape's param index)
    /// or a constant.
    Leaf,
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    MulElem(NodeId, NodeId),
    Concat(NodeId, NodeId),
    Mean(Vec<NodeId>),
    Sum(Vec<NodeId>),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    /// Numerically-stabilized softmax cross-entropy against a class index.
    CrossEntropy { logits: NodeId, label: usize },
}

struct Node {
    op: Op,
    value: Arc<Tensor>,
    needs_grad: bool,
}

/// Append-only dynamic computation graph.
///
/// Operand ids always precede the node, so one reverse sweep visits each node
/// exactly once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamKey, NodeId>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn of(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.idx()].as_ref()
    }

    /// Gradients of all parameter leaves, sorted by key for deterministic
    /// downstream accumulation.
    pub fn into_param_grads(mut self, tape: &Tape) -> Vec<(ParamKey, Tensor)> {
        let mut out: Vec<(ParamKey, Tensor)> = Vec::with_capacity(tape.params.len());
        for (&key, &node) in &tape.params {
            if let Some(g) = self.by_node[node.idx()].take() {
                out.push((key, g));
            }
        }
        out.sort_by_key(|(k, _)| *k);
        out
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.idx()].value
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op, value: Arc::new(value), needs_grad });
        id
    }

    fn push_checked(&mut self, op: Op, value: Tensor, needs_grad: bool, name: &'static str) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFiniteValue { op: name });
        }
        Ok(self.push(op, value, needs_grad))
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.idx()].needs_grad
    }

    /// Insert a parameter leaf; repeated insertions of the same key return the
    /// same node so gradients accumulate across uses.
    pub fn leaf_param(&mut self, key: ParamKey, value: Arc<Tensor>) -> NodeId {
        if let Some(&id) = self.params.get(&key) {
            return id;
        }
        let id = NodeId(self.nodes.len() as u32);
        self.nodes.push(Node { op: Op::Leaf, value, needs_grad: true });
        self.params.insert(key, id);
        id
    }

    pub fn leaf_const(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    pub fn zeros(&mut self, rows: usize) -> NodeId {
        self.leaf_const(Tensor::zeros(rows, 1))
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (wr, wc) = self.value(w).shape();
        let (xr, xc) = self.value(x).shape();
        if xc != 1 || wc != xr {
            return Err(AutodiffError::ShapeMismatch { op: "matvec", lhs: (wr, wc), rhs: (xr, xc) });
        }
        let wd = self.value(w).data();
        let xd = self.value(x).data();
        let mut out = vec![0.0; wr];
        for (o, row) in out.iter_mut().zip(wd.chunks_exact(wc)) {
            let mut acc = 0.0;
            for (a, b) in row.iter().zip(xd) {
                acc += a * b;
            }
            *o = acc;
        }
        let needs = self.needs(w) || self.needs(x);
        self.push_checked(Op::MatVec(w, x), Tensor::vector(out), needs, "matvec")
    }

    fn zip_op(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if (ar, ac) != (br, bc) {
            return Err(AutodiffError::ShapeMismatch { op: name, lhs: (ar, ac), rhs: (br, bc) });
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push_checked(op(a, b), Tensor::from_vec(ar, ac, data), needs, name)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn mul_elem(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_op(a, b, "mul_elem", |x, y| x * y, Op::MulElem)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != 1 || bc != 1 {
            return Err(AutodiffError::ShapeMismatch { op: "concat", lhs: (ar, ac), rhs: (br, bc) });
        }
        let mut data = Vec::with_capacity(ar + br);
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let needs = self.needs(a) || self.needs(b);
        self.push_checked(Op::Concat(a, b), Tensor::vector(data), needs, "concat")
    }

    fn reduce(&mut self, items: &[NodeId], name: &'static str, mean: bool) -> Result<NodeId> {
        assert!(!items.is_empty(), "{name} needs at least one operand");
        let shape = self.value(items[0]).shape();
        let mut acc = self.value(items[0]).clone();
        for &id in &items[1..] {
            if self.value(id).shape() != shape {
                return Err(AutodiffError::ShapeMismatch {
                    op: name,
                    lhs: shape,
                    rhs: self.value(id).shape(),
                });
            }
            acc.add_assign(self.value(id));
        }
        if mean {
            acc.scale(1.0 / items.len() as f64);
        }
        let needs = items.iter().any(|&id| self.needs(id));
        let op = if mean { Op::Mean(items.to_vec()) } else { Op::Sum(items.to_vec()) };
        self.push_checked(op, acc, needs, name)
    }

    /// Elementwise mean over k same-shape tensors.
    pub fn mean(&mut self, items: &[NodeId]) -> Result<NodeId> {
        self.reduce(items, "mean", true)
    }

    /// Elementwise sum over k same-shape tensors.
    pub fn sum(&mut self, items: &[NodeId]) -> Result<NodeId> {
        self.reduce(items, "sum", false)
    }

    fn map_op(
        &mut self,
        a: NodeId,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl Fn(NodeId) -> Op,
    ) -> Result<NodeId> {
        let (r, c) = self.value(a).shape();
        let data = self.value(a).data().iter().map(|x| f(*x)).collect();
        let needs = self.needs(a);
        self.push_checked(op(a), Tensor::from_vec(r, c, data), needs, name)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_op(a, "sigmoid", |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_op(a, "tanh", f64::tanh, Op::Tanh)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.map_op(a, "relu", |x| x.max(0.0), Op::Relu)
    }

    /// `-log softmax(logits)[label]`, stabilized by max subtraction.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        let v = self.value(logits);
        if v.cols() != 1 {
            return Err(AutodiffError::NonScalarLoss(v.shape()));
        }
        if label >= v.rows() {
            return Err(AutodiffError::LabelOutOfRange { label, classes: v.rows() });
        }
        let z = v.data();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum: f64 = z.iter().map(|x| (x - zmax).exp()).sum::<f64>().ln();
        let loss = log_sum - (z[label] - zmax);
        let needs = self.needs(logits);
        self.push_checked(Op::CrossEntropy { logits, label }, Tensor::scalar(loss), needs, "cross_entropy")
    }

    fn softmax_of(&self, logits: NodeId) -> Vec<f64> {
        let z = self.value(logits).data();
        let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = z.iter().map(|x| (x - zmax).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    /// Reverse sweep from a scalar loss node. Nodes that cannot influence a
    /// parameter leaf are skipped.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).shape() != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.idx()] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.idx()).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::MatVec(w, x) => {
                    if self.needs(*w) {
                        let xd = self.value(*x).data();
                        let gw = grads[w.idx()].get_or_insert_with(|| {
                            let (r, c) = self.value(*w).shape();
                            Tensor::zeros(r, c)
                        });
                        let cols = self.value(*w).cols();
                        for (i, gi) in g.data().iter().enumerate() {
                            let row = &mut gw.data_mut()[i * cols..(i + 1) * cols];
                            for (dst, xj) in row.iter_mut().zip(xd) {
                                *dst += gi * xj;
                            }
                        }
                    }
                    if self.needs(*x) {
                        let wd = self.value(*w).data();
                        let cols = self.value(*w).cols();
                        let gx = grads[x.idx()]
                            .get_or_insert_with(|| Tensor::zeros(self.value(*x).rows(), 1));
                        for (i, gi) in g.data().iter().enumerate() {
                            let row = &wd[i * cols..(i + 1) * cols];
                            for (dst, wj) in gx.data_mut().iter_mut().zip(row) {
                                *dst += gi * wj;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for &side in &[*a, *b] {
                        if self.needs(side) {
                            self.accumulate(&mut grads, side, g.data().iter().copied());
                        }
                    }
                }
                Op::MulElem(a, b) => {
                    if self.needs(*a) {
                        let other = self.value(*b).data();
                        self.accumulate(
                            &mut grads,
                            *a,
                            g.data().iter().zip(other).map(|(gi, o)| gi * o),
                        );
                    }
                    if self.needs(*b) {
                        let other = self.value(*a).data();
                        self.accumulate(
                            &mut grads,
                            *b,
                            g.data().iter().zip(other).map(|(gi, o)| gi * o),
                        );
                    }
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).rows();
                    if self.needs(*a) {
                        self.accumulate(&mut grads, *a, g.data()[..na].iter().copied());
                    }
                    if self.needs(*b) {
                        self.accumulate(&mut grads, *b, g.data()[na..].iter().copied());
                    }
                }
                Op::Mean(items) => {
                    let k = items.len() as f64;
                    for &item in items {
                        if self.needs(item) {
                            self.accumulate(&mut grads, item, g.data().iter().map(|gi| gi / k));
                        }
                    }
                }
                Op::Sum(items) => {
                    for &item in items {
                        if self.needs(item) {
                            self.accumulate(&mut grads, item, g.data().iter().copied());
                        }
                    }
                }
                Op::Sigmoid(a) => {
                    let y = self.value(NodeId(idx as u32)).data().to_vec();
                    self.accumulate(
                        &mut grads,
                        *a,
                        g.data().iter().zip(&y).map(|(gi, yi)| gi * yi * (1.0 - yi)),
                    );
                }
                Op::Tanh(a) => {
                    let y = self.value(NodeId(idx as u32)).data().to_vec();
                    self.accumulate(
                        &mut grads,
                        *a,
                        g.data().iter().zip(&y).map(|(gi, yi)| gi * (1.0 - yi * yi)),
                    );
                }
                Op::Relu(a) => {
                    let x = self.value(*a).data().to_vec();
                    // subgradient 0 at x == 0
                    self.accumulate(
                        &mut grads,
                        *a,
                        g.data().iter().zip(&x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }),
                    );
                }
                Op::CrossEntropy { logits, label } => {
                    let gs = g.data()[0];
                    let mut p = self.softmax_of(*logits);
                    p[*label] -= 1.0;
                    self.accumulate(&mut grads, *logits, p.iter().map(|pi| gs * pi));
                }
            }
        }
        Ok(Gradients { by_node: grads })
    }

    fn accumulate(
        &self,
        grads: &mut [Option<Tensor>],
        target: NodeId,
        values: impl Iterator<Item = f64>,
    ) {
        let (r, c) = self.value(target).shape();
        let slot = grads[target.idx()].get_or_insert_with(|| Tensor::zeros(r, c));
        for (dst, v) in slot.data_mut().iter_mut().zip(values) {
            *dst += v;
        }
    }
}

/// Scaled relative error: |a-b| / max(1, |a|, |b|).
///
/// Degrades to absolute error near zero so finite-difference noise on tiny
/// gradients does not dominate.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0f64.max(a.abs()).max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(group: u32, slot: u32) -> ParamKey {
        ParamKey { group, slot }
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf_param(key(0, 0), Arc::new(Tensor::scalar(0.0)));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data()[0], 0.5);
        let grads = tape.backward(y).unwrap();
        assert_eq!(grads.of(x).unwrap().data()[0], 0.25);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf_param(key(0, 0), Arc::new(Tensor::vector(vec![0.0, -1.0, 2.0])));
        let y = tape.relu(x).unwrap();
        let ones = tape.leaf_const(Tensor::vector(vec![1.0, 1.0, 1.0]));
        let s = tape.mul_elem(y, ones).unwrap();
        let total = tape.sum(&[s]).unwrap();
        // reduce to scalar via matvec with a row of ones
        let row = tape.leaf_const(Tensor::from_vec(1, 3, vec![1.0, 1.0, 1.0]));
        let loss = tape.matvec(row, total).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn identity_loss_grad_is_one_and_reuse_accumulates() {
        let mut tape = Tape::new();
        let x = tape.leaf_param(key(0, 0), Arc::new(Tensor::scalar(1.5)));
        let grads = tape.backward(x).unwrap();
        assert_eq!(grads.of(x).unwrap().data()[0], 1.0);

        // loss = x + x : gradient accumulates to 2
        let mut tape = Tape::new();
        let x = tape.leaf_param(key(0, 0), Arc::new(Tensor::scalar(1.5)));
        let x2 = tape.leaf_param(key(0, 0), Arc::new(Tensor::scalar(1.5)));
        assert_eq!(x, x2, "same key deduplicates to one leaf");
        let loss = tape.add(x, x2).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.of(x).unwrap().data()[0], 2.0);
    }

    #[test]
    fn shape_mismatch_and_nonscalar_loss_error() {
        let mut tape = Tape::new();
        let a = tape.leaf_const(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.leaf_const(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(AutodiffError::ShapeMismatch { .. })));
        assert!(matches!(tape.backward(b), Err(AutodiffError::NonScalarLoss(_))));
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf_const(Tensor::scalar(1e308));
        let b = tape.leaf_const(Tensor::scalar(1e308));
        assert!(matches!(tape.add(a, b), Err(AutodiffError::NonFiniteValue { .. })));
    }

    /// Forward pass of a fixed 8-dim composite expression, as a plain function
    /// of the two parameter vectors. Used as the finite-difference oracle.
    fn composite_loss(p: &[f64; 8], q: &[f64; 8]) -> f64 {
        let mut tape = Tape::new();
        let a = tape.leaf_param(key(0, 0), Arc::new(Tensor::vector(p.to_vec())));
        let b = tape.leaf_param(key(0, 1), Arc::new(Tensor::vector(q.to_vec())));
        let s = tape.sigmoid(a).unwrap();
        let t = tape.tanh(b).unwrap();
        let m = tape.mul_elem(s, t).unwrap();
        let r = tape.relu(m).unwrap();
        let mn = tape.mean(&[r, s, t]).unwrap();
        let c = tape.concat(mn, m).unwrap();
        let w = tape.leaf_const(Tensor::from_vec(
            1,
            16,
            (0..16).map(|i| 0.1 * (i as f64) - 0.8).collect(),
        ));
        let out = tape.matvec(w, c).unwrap();
        tape.value(out).data()[0]
    }

    #[test]
    fn composite_gradients_match_central_finite_differences() {
        let p: [f64; 8] = [0.3, -1.2, 0.7, 1.9, -0.4, 0.05, -1.7, 1.1];
        let q: [f64; 8] = [-0.9, 0.2, 1.4, -0.6, 1.8, -1.3, 0.5, 0.9];

        // analytic
        let mut tape = Tape::new();
        let a = tape.leaf_param(key(0, 0), Arc::new(Tensor::vector(p.to_vec())));
        let b = tape.leaf_param(key(0, 1), Arc::new(Tensor::vector(q.to_vec())));
        let s = tape.sigmoid(a).unwrap();
        let t = tape.tanh(b).unwrap();
        let m = tape.mul_elem(s, t).unwrap();
        let r = tape.relu(m).unwrap();
        let mn = tape.mean(&[r, s, t]).unwrap();
        let c = tape.concat(mn, m).unwrap();
        let w = tape.leaf_const(Tensor::from_vec(
            1,
            16,
            (0..16).map(|i| 0.1 * (i as f64) - 0.8).collect(),
        ));
        let out = tape.matvec(w, c).unwrap();
        let grads = tape.backward(out).unwrap();
        let ga = grads.of(a).unwrap().data().to_vec();
        let gb = grads.of(b).unwrap().data().to_vec();

        let h = 1e-5;
        let mut max_err: f64 = 0.0;
        for i in 0..8 {
            let mut plus = p;
            let mut minus = p;
            plus[i] += h;
            minus[i] -= h;
            let fd = (composite_loss(&plus, &q) - composite_loss(&minus, &q)) / (2.0 * h);
            max_err = max_err.max(rel_err(ga[i], fd));

            let mut plus = q;
            let mut minus = q;
            plus[i] += h;
            minus[i] -= h;
            let fd = (composite_loss(&p, &plus) - composite_loss(&p, &minus)) / (2.0 * h);
            max_err = max_err.max(rel_err(gb[i], fd));
        }
        assert!(max_err <= 1e-6, "max relative error {max_err} exceeds 1e-6");
    }

    #[test]
    fn cross_entropy_values_and_gradient() {
        // uniform logits over K classes -> ln K
        let mut tape = Tape::new();
        let z = tape.leaf_param(key(0, 0), Arc::new(Tensor::vector(vec![0.7; 5])));
        let loss = tape.cross_entropy(z, 2).unwrap();
        assert!((tape.value(loss).data()[0] - (5.0f64).ln()).abs() < 1e-12);

        // +50 margin on the true class saturates the loss to ~0
        let mut tape = Tape::new();
        let z = tape.leaf_param(key(0, 0), Arc::new(Tensor::vector(vec![50.0, 0.0, 0.0])));
        let loss = tape.cross_entropy(z, 0).unwrap();
        assert!(tape.value(loss).data()[0] <= 1e-20);

        // gradient = softmax - onehot, checked against finite differences
        let logits = [0.2, -0.7, 1.3, 0.4];
        let label = 1;
        let loss_of = |z: &[f64; 4]| {
            let mut tape = Tape::new();
            let n = tape.leaf_param(key(0, 0), Arc::new(Tensor::vector(z.to_vec())));
            let l = tape.cross_entropy(n, label).unwrap();
            tape.value(l).data()[0]
        };
        let mut tape = Tape::new();
        let n = tape.leaf_param(key(0, 0), Arc::new(Tensor::vector(logits.to_vec())));
        let l = tape.cross_entropy(n, label).unwrap();
        let g = tape.backward(l).unwrap().of(n).unwrap().data().to_vec();
        let h = 1e-6;
        for i in 0..4 {
            let mut plus = logits;
            let mut minus = logits;
            plus[i] += h;
            minus[i] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            assert!(rel_err(g[i], fd) <= 1e-8, "component {i}: {} vs {}", g[i], fd);
        }
        // out-of-range label
        let mut tape = Tape::new();
        let n = tape.leaf_const(Tensor::vector(vec![0.0, 0.0]));
        assert!(matches!(
            tape.cross_entropy(n, 2),
            Err(AutodiffError::LabelOutOfRange { .. })
        ));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        /// Random expression DAGs over the op set with inputs in [-2, 2]:
        /// analytic gradient must match central finite differences.
        #[derive(Debug, Clone)]
        enum Step {
            Sigmoid(usize),
            Tanh(usize),
            Relu(usize),
            Add(usize, usize),
            Mul(usize, usize),
            Mean(usize, usize, usize),
        }

        fn build(params: &[Vec<f64>; 2], steps: &[Step]) -> (Tape, NodeId, NodeId, NodeId) {
            let mut tape = Tape::new();
            let a = tape.leaf_param(ParamKey { group: 0, slot: 0 }, Arc::new(Tensor::vector(params[0].clone())));
            let b = tape.leaf_param(ParamKey { group: 0, slot: 1 }, Arc::new(Tensor::vector(params[1].clone())));
            let mut nodes = vec![a, b];
            for s in steps {
                let pick = |i: usize| nodes[i % nodes.len()];
                let n = match s {
                    Step::Sigmoid(i) => tape.sigmoid(pick(*i)).unwrap(),
                    Step::Tanh(i) => tape.tanh(pick(*i)).unwrap(),
                    Step::Relu(i) => tape.relu(pick(*i)).unwrap(),
                    Step::Add(i, j) => {
                        let (x, y) = (pick(*i), pick(*j));
                        tape.add(x, y).unwrap()
                    }
                    Step::Mul(i, j) => {
                        let (x, y) = (pick(*i), pick(*j));
                        tape.mul_elem(x, y).unwrap()
                    }
                    Step::Mean(i, j, k) => {
                        let items = [pick(*i), pick(*j), pick(*k)];
                        tape.mean(&items).unwrap()
                    }
                };
                nodes.push(n);
            }
            let last = *nodes.last().unwrap();
            // squash then reduce to scalar so the loss stays well-scaled
            let sq = tape.tanh(last).unwrap();
            let dim = tape.value(sq).rows();
            let row = tape.leaf_const(Tensor::from_vec(1, dim, vec![1.0; dim]));
            let loss = tape.matvec(row, sq).unwrap();
            (tape, loss, a, b)
        }

        fn arb_steps() -> impl Strategy<Value = Vec<Step>> {
            prop::collection::vec(
                prop_oneof![
                    (0usize..12).prop_map(Step::Sigmoid),
                    (0usize..12).prop_map(Step::Tanh),
                    (0usize..12).prop_map(Step::Relu),
                    (0usize..12, 0usize..12).prop_map(|(i, j)| Step::Add(i, j)),
                    (0usize..12, 0usize..12).prop_map(|(i, j)| Step::Mul(i, j)),
                    (0usize..12, 0usize..12, 0usize..12)
                        .prop_map(|(i, j, k)| Step::Mean(i, j, k)),
                ],
                1..8,
            )
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn gradient_check_random_expressions(
                steps in arb_steps(),
                p in prop::collection::vec(-2.0f64..2.0, 4),
                q in prop::collection::vec(-2.0f64..2.0, 4),
            ) {
                let params = [p.clone(), q.clone()];
                let (tape, loss, a, b) = build(&params, &steps);
                let grads = tape.backward(loss).unwrap();
                let ga = grads.of(a).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; 4]);
                let gb = grads.of(b).map(|t| t.data().to_vec()).unwrap_or(vec![0.0; 4]);
                let h = 1e-5;
                for i in 0..4 {
                    for (which, gvec) in [(0usize, &ga), (1usize, &gb)] {
                        let mut plus = params.clone();
                        let mut minus = params.clone();
                        plus[which][i] += h;
                        minus[which][i] -= h;
                        let (tp, lp, _, _) = build(&plus, &steps);
                        let (tm, lm, _, _) = build(&minus, &steps);
                        let fd = (tp.value(lp).data()[0] - tm.value(lm).data()[0]) / (2.0 * h);
                        // relu kinks can sit within h of an evaluation point;
                        // tolerate those by bounding with a loose absolute check too
                        let err = rel_err(gvec[i], fd);
                        prop_assert!(
                            err <= 1e-5 || (gvec[i] - fd).abs() <= 2e-4,
                            "param {which}[{i}]: analytic {} vs fd {}",
                            gvec[i], fd
                        );
                    }
                }
            }
        }
    }
}

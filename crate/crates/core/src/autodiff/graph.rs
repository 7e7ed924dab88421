use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tensor::Tensor;

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    MatMul(NodeId, NodeId),
    /// `x (m, in)`, `w (out, in)`, `b (out)`: `y = x w^T + b`.
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Softmax(NodeId),
    LogSoftmax(NodeId),
    SquaredL2(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    MeanRows { x: NodeId, group: usize },
    CrossEntropy { logits: NodeId, labels: Vec<usize>, probs: Vec<T> },
    Kl { student: NodeId, probs: Vec<T>, log_ratio: Vec<T>, row_kl: Vec<T>, temperature: T },
    StraightThrough(NodeId),
    GatherRows { table: NodeId, indices: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Tape of tensor operations for one forward/backward pass.
///
/// Nodes are appended in creation order, which is a topological order, so
/// backward walks the tape in reverse and visits each node once. Every
/// reduction runs in index order; identical inputs give bitwise-identical
/// values and gradients. The subgradient of relu at exactly 0 is 0.
#[derive(Clone, Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

fn mismatch(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

/// Row-wise softmax of `values / temperature` with the row max subtracted.
pub fn softmax_rows<T: Scalar>(values: &[T], cols: usize, temperature: T) -> Vec<T> {
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks_exact(cols) {
        let mut max = T::neg_infinity();
        for &v in row {
            max = max.max(v / temperature);
        }
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v / temperature - max).exp();
            total = total + e;
            out.push(e);
        }
        for e in &mut out[start..] {
            *e = *e / total;
        }
    }
    out
}

/// Row-wise log-softmax of `values / temperature`.
pub fn log_softmax_rows<T: Scalar>(values: &[T], cols: usize, temperature: T) -> Vec<T> {
    let mut out = Vec::with_capacity(values.len());
    for row in values.chunks_exact(cols) {
        let mut max = T::neg_infinity();
        for &v in row {
            max = max.max(v / temperature);
        }
        let mut total = T::zero();
        for &v in row {
            total = total + (v / temperature - max).exp();
        }
        let log_z = max + total.ln();
        out.extend(row.iter().map(|&v| v / temperature - log_z));
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_unchecked(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient of the last backward pass; `None` before backward or for
    /// nodes that do not require a gradient.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Vec<T>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }

    fn push_unchecked(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, values: Vec<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push_unchecked(Tensor::from_parts(shape, values), op, requires_grad))
    }

    fn same_shape(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, op_name: &'static str, a: NodeId, b: NodeId, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<NodeId> {
        self.same_shape(op_name, a, b)?;
        let va = self.value(a).values();
        let vb = self.value(b).values();
        let values = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.value(a).shape().to_vec();
        self.push(op_name, shape, values, op, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_with("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, factor: T) -> Result<NodeId> {
        let values = self.value(a).values().iter().map(|&x| x * factor).collect();
        let shape = self.value(a).shape().to_vec();
        self.push("scale", shape, values, Op::Scale(a, factor), &[a])
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(mismatch("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let va = self.value(a).values();
        let vb = self.value(b).values();
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = va[i * k + p];
                for (o, &y) in row.iter_mut().zip(&vb[p * n..(p + 1) * n]) {
                    *o = *o + x * y;
                }
            }
        }
        self.push("matmul", vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `y = W x + b` applied to every row of `x`: `x (m, in)` or `(in)`,
    /// `w (out, in)`, `b (out)`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (sx, sw, sb) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        let in_dim = *sx.last().unwrap();
        if sw.len() != 2 || sw[1] != in_dim || sb != [sw[0]] || sx.len() > 2 {
            return Err(mismatch("affine", format!("x {sx:?}, w {sw:?}, b {sb:?}")));
        }
        let out_dim = sw[0];
        let rows = self.value(x).len() / in_dim;
        let vx = self.value(x).values();
        let vw = self.value(w).values();
        let vb = self.value(b).values();
        // transposed weights keep the inner loop contiguous
        let mut wt = vec![T::zero(); in_dim * out_dim];
        for o in 0..out_dim {
            for k in 0..in_dim {
                wt[k * out_dim + o] = vw[o * in_dim + k];
            }
        }
        let mut out = Vec::with_capacity(rows * out_dim);
        for r in 0..rows {
            let start = out.len();
            out.extend_from_slice(vb);
            let row = &mut out[start..];
            for k in 0..in_dim {
                let xv = vx[r * in_dim + k];
                for (o, &wv) in row.iter_mut().zip(&wt[k * out_dim..(k + 1) * out_dim]) {
                    *o = *o + xv * wv;
                }
            }
        }
        let shape = if sx.len() == 1 { vec![out_dim] } else { vec![rows, out_dim] };
        self.push("affine", shape, out, Op::Affine { x, w, b }, &[x, w, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let values = self.value(a).values().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect();
        let shape = self.value(a).shape().to_vec();
        self.push("relu", shape, values, Op::Relu(a), &[a])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, cols) = self.value(a).rows_cols();
        let values = softmax_rows(self.value(a).values(), cols, T::one());
        let shape = self.value(a).shape().to_vec();
        self.push("softmax", shape, values, Op::Softmax(a), &[a])
    }

    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let (_, cols) = self.value(a).rows_cols();
        let values = log_softmax_rows(self.value(a).values(), cols, T::one());
        let shape = self.value(a).shape().to_vec();
        self.push("log_softmax", shape, values, Op::LogSoftmax(a), &[a])
    }

    /// Sum of squared entries, as a scalar.
    pub fn squared_l2(&mut self, a: NodeId) -> Result<NodeId> {
        let mut acc = T::zero();
        for &x in self.value(a).values() {
            acc = acc + x * x;
        }
        self.push("squared_l2", vec![1], vec![acc], Op::SquaredL2(a), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total = crate::scalar::ordered_sum(self.value(a).values());
        self.push("sum", vec![1], vec![total], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let total = crate::scalar::ordered_sum(v.values()) / T::of_usize(v.len());
        self.push("mean", vec![1], vec![total], Op::Mean(a), &[a])
    }

    /// Mean over consecutive groups of `group` rows: `(b * group, d) -> (b, d)`.
    pub fn mean_rows(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let (rows, cols) = self.value(x).rows_cols();
        if group == 0 || rows % group != 0 {
            return Err(mismatch("mean_rows", format!("{rows} rows not divisible into groups of {group}")));
        }
        let batches = rows / group;
        let inv = T::one() / T::of_usize(group);
        let vx = self.value(x).values();
        let mut out = vec![T::zero(); batches * cols];
        for b in 0..batches {
            let acc = &mut out[b * cols..(b + 1) * cols];
            for r in 0..group {
                let row = &vx[(b * group + r) * cols..(b * group + r + 1) * cols];
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
            for a in acc.iter_mut() {
                *a = *a * inv;
            }
        }
        self.push("mean_rows", vec![batches, cols], out, Op::MeanRows { x, group }, &[x])
    }

    /// Mean over rows of `-log softmax(logits)[label]`; `logits` is `(C)` or
    /// `(B, C)`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let (rows, classes) = self.value(logits).rows_cols();
        if labels.len() != rows {
            return Err(mismatch("cross_entropy", format!("{rows} rows, {} labels", labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let v = self.value(logits).values();
        let log_p = log_softmax_rows(v, classes, T::one());
        let mut loss = T::zero();
        for (r, &label) in labels.iter().enumerate() {
            loss = loss - log_p[r * classes + label];
        }
        loss = loss / T::of_usize(rows);
        let probs = log_p.iter().map(|&l| l.exp()).collect();
        let op = Op::CrossEntropy { logits, labels: labels.to_vec(), probs };
        self.push("cross_entropy", vec![1], vec![loss], op, &[logits])
    }

    /// Mean over rows of `KL(softmax(s / T) || softmax(t / T))`. The teacher
    /// logits are a constant; only `student` receives a gradient.
    pub fn kl_consistency(&mut self, student: NodeId, teacher: &Tensor<T>, temperature: T) -> Result<NodeId> {
        if !(temperature > T::zero()) || !temperature.is_finite() {
            return Err(Error::InvalidArgument(format!("temperature must be positive and finite, got {temperature}")));
        }
        let s = self.value(student);
        if s.shape() != teacher.shape() {
            return Err(mismatch("kl_consistency", format!("{:?} vs {:?}", s.shape(), teacher.shape())));
        }
        let (rows, cols) = s.rows_cols();
        let log_p = log_softmax_rows(s.values(), cols, temperature);
        let log_q = log_softmax_rows(teacher.values(), cols, temperature);
        let probs: Vec<T> = log_p.iter().map(|&l| l.exp()).collect();
        let log_ratio: Vec<T> = log_p.iter().zip(&log_q).map(|(&a, &b)| a - b).collect();
        let mut row_kl = Vec::with_capacity(rows);
        let mut total = T::zero();
        for r in 0..rows {
            let mut kl = T::zero();
            for c in r * cols..(r + 1) * cols {
                kl = kl + probs[c] * log_ratio[c];
            }
            row_kl.push(kl);
            total = total + kl;
        }
        let loss = total / T::of_usize(rows);
        let op = Op::Kl { student, probs, log_ratio, row_kl, temperature };
        self.push("kl_consistency", vec![1], vec![loss], op, &[student])
    }

    /// Forward value `quantized`, backward passes the incoming gradient to
    /// `input` unchanged.
    pub fn straight_through(&mut self, input: NodeId, quantized: Tensor<T>) -> Result<NodeId> {
        let s = self.value(input).shape();
        if s != quantized.shape() {
            return Err(mismatch("straight_through", format!("{s:?} vs {:?}", quantized.shape())));
        }
        let shape = quantized.shape().to_vec();
        self.push("straight_through", shape, quantized.into_values(), Op::StraightThrough(input), &[input])
    }

    /// Rows of a `(n, d)` table selected by `indices`: `(indices.len(), d)`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId> {
        let (n, d) = self.value(table).rows_cols();
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(mismatch("gather_rows", format!("index {bad} for table of {n} rows")));
        }
        let vt = self.value(table).values();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&vt[i * d..(i + 1) * d]);
        }
        let op = Op::GatherRows { table, indices: indices.to_vec() };
        self.push("gather_rows", vec![indices.len(), d], out, op, &[table])
    }

    /// Reverse pass from a scalar `loss`. Populates a gradient for every node
    /// that requires one (zeros for leaves the loss does not reach). A graph
    /// supports a single backward pass.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if !self.value(loss).is_scalar() {
            return Err(Error::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        self.grads = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            self.fill_leaf_zeros();
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            if self.nodes[id].requires_grad {
                self.propagate(id, &g);
            }
            self.grads[id] = Some(g);
        }
        self.fill_leaf_zeros();
        for (node, grad) in self.nodes.iter().zip(self.grads.iter_mut()) {
            if !node.requires_grad {
                *grad = None;
            }
        }
        Ok(())
    }

    fn fill_leaf_zeros(&mut self) {
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && self.grads[i].is_none() {
                self.grads[i] = Some(vec![T::zero(); node.value.len()]);
            }
        }
    }

    fn accumulate(&mut self, target: NodeId, f: impl FnOnce(&mut [T], &[Node<T>])) {
        if !self.nodes[target.0].requires_grad {
            return;
        }
        let len = self.nodes[target.0].value.len();
        let slot = self.grads[target.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot, &self.nodes);
    }

    fn propagate(&mut self, id: usize, g: &[T]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(a, |ga, _| add_into(ga, g));
                self.accumulate(b, |gb, _| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(a, |ga, _| add_into(ga, g));
                self.accumulate(b, |gb, _| {
                    for (x, &y) in gb.iter_mut().zip(g) {
                        *x = *x - y;
                    }
                });
            }
            Op::Mul(a, b) => {
                self.accumulate(a, |ga, nodes| {
                    for ((x, &y), &bv) in ga.iter_mut().zip(g).zip(nodes[b.0].value.values()) {
                        *x = *x + y * bv;
                    }
                });
                self.accumulate(b, |gb, nodes| {
                    for ((x, &y), &av) in gb.iter_mut().zip(g).zip(nodes[a.0].value.values()) {
                        *x = *x + y * av;
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(a, |ga, _| {
                for (x, &y) in ga.iter_mut().zip(g) {
                    *x = *x + c * y;
                }
            }),
            Op::MatMul(a, b) => {
                let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                let n = self.value(b).shape()[1];
                // dA = G B^T
                self.accumulate(a, |ga, nodes| {
                    let vb = nodes[b.0].value.values();
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc = acc + g[i * n + j] * vb[p * n + j];
                            }
                            ga[i * k + p] = ga[i * k + p] + acc;
                        }
                    }
                });
                // dB = A^T G
                self.accumulate(b, |gb, nodes| {
                    let va = nodes[a.0].value.values();
                    for i in 0..m {
                        for p in 0..k {
                            let x = va[i * k + p];
                            for (o, &y) in gb[p * n..(p + 1) * n].iter_mut().zip(&g[i * n..(i + 1) * n]) {
                                *o = *o + x * y;
                            }
                        }
                    }
                });
            }
            Op::Affine { x, w, b } => {
                let (out_dim, in_dim) = (self.value(w).shape()[0], self.value(w).shape()[1]);
                let rows = self.value(x).len() / in_dim;
                self.accumulate(x, |gx, nodes| {
                    let vw = nodes[w.0].value.values();
                    for r in 0..rows {
                        let row = &mut gx[r * in_dim..(r + 1) * in_dim];
                        for o in 0..out_dim {
                            let gv = g[r * out_dim + o];
                            for (t, &wv) in row.iter_mut().zip(&vw[o * in_dim..(o + 1) * in_dim]) {
                                *t = *t + gv * wv;
                            }
                        }
                    }
                });
                self.accumulate(w, |gw, nodes| {
                    let vx = nodes[x.0].value.values();
                    for r in 0..rows {
                        let xr = &vx[r * in_dim..(r + 1) * in_dim];
                        for o in 0..out_dim {
                            let gv = g[r * out_dim + o];
                            for (t, &xv) in gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(xr) {
                                *t = *t + gv * xv;
                            }
                        }
                    }
                });
                self.accumulate(b, |gb, _| {
                    for r in 0..rows {
                        for (t, &gv) in gb.iter_mut().zip(&g[r * out_dim..(r + 1) * out_dim]) {
                            *t = *t + gv;
                        }
                    }
                });
            }
            Op::Relu(a) => self.accumulate(a, |ga, nodes| {
                for ((t, &gv), &xv) in ga.iter_mut().zip(g).zip(nodes[a.0].value.values()) {
                    if xv > T::zero() {
                        *t = *t + gv;
                    }
                }
            }),
            Op::Softmax(a) => {
                let (_, cols) = self.value(a).rows_cols();
                let y = self.nodes[id].value.values().to_vec();
                self.accumulate(a, |ga, _| {
                    for ((gr, yr), tr) in g.chunks_exact(cols).zip(y.chunks_exact(cols)).zip(ga.chunks_exact_mut(cols)) {
                        let mut dot = T::zero();
                        for (&gv, &yv) in gr.iter().zip(yr) {
                            dot = dot + gv * yv;
                        }
                        for ((t, &gv), &yv) in tr.iter_mut().zip(gr).zip(yr) {
                            *t = *t + yv * (gv - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (_, cols) = self.value(a).rows_cols();
                let y = self.nodes[id].value.values().to_vec();
                self.accumulate(a, |ga, _| {
                    for ((gr, yr), tr) in g.chunks_exact(cols).zip(y.chunks_exact(cols)).zip(ga.chunks_exact_mut(cols)) {
                        let total = crate::scalar::ordered_sum(gr);
                        for ((t, &gv), &yv) in tr.iter_mut().zip(gr).zip(yr) {
                            *t = *t + gv - yv.exp() * total;
                        }
                    }
                });
            }
            Op::SquaredL2(a) => {
                let two_g = T::of(2.0) * g[0];
                self.accumulate(a, |ga, nodes| {
                    for (t, &xv) in ga.iter_mut().zip(nodes[a.0].value.values()) {
                        *t = *t + two_g * xv;
                    }
                });
            }
            Op::Sum(a) => self.accumulate(a, |ga, _| {
                for t in ga.iter_mut() {
                    *t = *t + g[0];
                }
            }),
            Op::Mean(a) => {
                let n = T::of_usize(self.value(a).len());
                self.accumulate(a, |ga, _| {
                    let share = g[0] / n;
                    for t in ga.iter_mut() {
                        *t = *t + share;
                    }
                });
            }
            Op::MeanRows { x, group } => {
                let (_, cols) = self.value(x).rows_cols();
                let inv = T::one() / T::of_usize(group);
                self.accumulate(x, |gx, _| {
                    for (r, row) in gx.chunks_exact_mut(cols).enumerate() {
                        let src = &g[(r / group) * cols..(r / group + 1) * cols];
                        for (t, &gv) in row.iter_mut().zip(src) {
                            *t = *t + gv * inv;
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let classes = probs.len() / labels.len();
                let share = g[0] / T::of_usize(labels.len());
                self.accumulate(logits, |gl, _| {
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == label { T::one() } else { T::zero() };
                            let i = r * classes + c;
                            gl[i] = gl[i] + share * (probs[i] - onehot);
                        }
                    }
                });
            }
            Op::Kl { student, probs, log_ratio, row_kl, temperature } => {
                let rows = row_kl.len();
                let cols = probs.len() / rows;
                let share = g[0] / (T::of_usize(rows) * temperature);
                self.accumulate(student, |gs, _| {
                    for r in 0..rows {
                        for c in r * cols..(r + 1) * cols {
                            gs[c] = gs[c] + share * probs[c] * (log_ratio[c] - row_kl[r]);
                        }
                    }
                });
            }
            Op::StraightThrough(input) => self.accumulate(input, |gi, _| add_into(gi, g)),
            Op::GatherRows { table, indices } => {
                let (_, d) = self.value(table).rows_cols();
                self.accumulate(table, |gt, _| {
                    for (r, &i) in indices.iter().enumerate() {
                        for (t, &gv) in gt[i * d..(i + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *t = *t + gv;
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

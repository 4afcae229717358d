use super::tensor::{matmul_accumulate, Tensor};
use super::GradError;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Row-broadcast add: rank-2 left operand, rank-1 right operand.
    AddRow(NodeId, NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Scale(NodeId, f64),
    // The constant is kept for Debug output; backward passes gradients through
    // unchanged.
    AddScalar(NodeId, #[allow(dead_code)] f64),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    MeanAxis(NodeId, usize),
    /// Mean negative log softmax over the batch. Softmax probabilities are
    /// cached at forward time and reused in the backward pass.
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Arena of computation nodes. Operations append nodes; [`Tape::backward`]
/// fills in gradients for every node on a path from a differentiable leaf to
/// the root.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input node.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input node; backward never visits it.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of the last backward root with respect to this node, if the
    /// node was reached.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, GradError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(GradError::ShapeMismatch {
                op: op_name,
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(value, op, rg))
    }

    fn unary(
        &mut self,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> NodeId {
        let value = self.value(a).map(f);
        let rg = self.requires(a);
        self.push(value, op, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `a @ b` for rank-2 operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GradError> {
        let (m, ka) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if ka != kb {
            return Err(GradError::ShapeMismatch {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = Tensor::zeros(&[m, n]);
        matmul_accumulate(
            m,
            ka,
            n,
            self.value(a).data(),
            self.value(b).data(),
            out.data_mut(),
        );
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    /// Adds a rank-1 row vector to every row of a rank-2 tensor.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId, GradError> {
        let (b, n) = self.value(a).dims2("add_row")?;
        let vr = self.value(row);
        if vr.shape() != [n] {
            return Err(GradError::ShapeMismatch {
                op: "add_row",
                lhs: self.value(a).shape().to_vec(),
                rhs: vr.shape().to_vec(),
            });
        }
        let mut data = self.value(a).data().to_vec();
        let rdata = vr.data();
        for i in 0..b {
            for j in 0..n {
                data[i * n + j] += rdata[j];
            }
        }
        let value = Tensor::new(vec![b, n], data)?;
        let rg = self.requires(a) || self.requires(row);
        Ok(self.push(value, Op::AddRow(a, row), rg))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Natural log; every element must be strictly positive.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(GradError::NonPositive { op: "log" });
        }
        Ok(self.unary(a, f64::ln, Op::Log(a)))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |v| v * v, Op::Square(a))
    }

    /// Elementwise square root; every element must be non-negative.
    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(GradError::NonPositive { op: "sqrt" });
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt(a)))
    }

    /// Rectifier; the subgradient at zero is taken to be zero.
    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |v| v * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.unary(a, |v| v + c, Op::AddScalar(a, c))
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        let rg = self.requires(a);
        self.push(Tensor::scalar(total), Op::Sum(a), rg)
    }

    /// Mean of all elements, as a scalar node.
    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, GradError> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(GradError::Empty);
        }
        let m = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.requires(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, GradError> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, GradError> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_axis(&mut self, a: NodeId, axis: usize, mean: bool) -> Result<NodeId, GradError> {
        let v = self.value(a);
        let rank = v.rank();
        if axis >= rank {
            return Err(GradError::AxisOutOfRange {
                op: if mean { "mean_axis" } else { "sum_axis" },
                axis,
                rank,
            });
        }
        let shape = v.shape();
        let axis_len = shape[axis];
        if mean && axis_len == 0 {
            return Err(GradError::Empty);
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let mut out = vec![0.0; outer * inner];
        let data = v.data();
        for o in 0..outer {
            for x in 0..axis_len {
                let base = (o * axis_len + x) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] += data[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / axis_len as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.requires(a);
        let op = if mean {
            Op::MeanAxis(a, axis)
        } else {
            Op::SumAxis(a, axis)
        };
        Ok(self.push(value, op, rg))
    }

    /// Mean cross entropy between softmax of `logits` ([batch, classes]) and
    /// integer `labels`. Log-sum-exp is computed with the row max subtracted,
    /// so large-magnitude logits stay finite.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, GradError> {
        let (b, c) = self.value(logits).dims2("softmax_cross_entropy")?;
        if labels.len() != b {
            return Err(GradError::LabelCountMismatch {
                labels: labels.len(),
                batch: b,
            });
        }
        if b == 0 {
            return Err(GradError::Empty);
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(GradError::LabelOutOfRange {
                label: bad,
                classes: c,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![0.0; b * c];
        let mut loss = 0.0;
        for i in 0..b {
            let row = &z[i * c..(i + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                probs[i * c + j] = e;
                s += e;
            }
            let inv = 1.0 / s;
            for j in 0..c {
                probs[i * c + j] *= inv;
            }
            loss += s.ln() + m - row[labels[i]];
        }
        loss /= b as f64;
        let rg = self.requires(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs: Tensor::new(vec![b, c], probs)?,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar root. Existing gradients are cleared first,
    /// so repeated calls yield identical results. Nodes that cannot reach a
    /// differentiable leaf are skipped.
    pub fn backward(&mut self, root: NodeId) -> Result<(), GradError> {
        let rv = &self.nodes[root.0].value;
        if rv.len() != 1 {
            return Err(GradError::NonScalarRoot {
                shape: rv.shape().to_vec(),
            });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        let seed_shape = self.nodes[root.0].value.shape().to_vec();
        self.nodes[root.0].grad = Some(Tensor::full(&seed_shape, 1.0));

        for i in (0..=root.0).rev() {
            let (before, after) = self.nodes.split_at_mut(i);
            let node = &after[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_ref() else {
                continue;
            };
            let g = g.data();
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(before, *a, |d| axpy(d, g, 1.0));
                    accumulate(before, *b, |d| axpy(d, g, 1.0));
                }
                Op::Sub(a, b) => {
                    accumulate(before, *a, |d| axpy(d, g, 1.0));
                    accumulate(before, *b, |d| axpy(d, g, -1.0));
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let vb = before[b.0].value.data().to_vec();
                    accumulate(before, a, |d| {
                        for ((o, &gv), &bv) in d.iter_mut().zip(g).zip(&vb) {
                            *o += gv * bv;
                        }
                    });
                    let va = before[a.0].value.data().to_vec();
                    accumulate(before, b, |d| {
                        for ((o, &gv), &av) in d.iter_mut().zip(g).zip(&va) {
                            *o += gv * av;
                        }
                    });
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let (m, k) = (before[a.0].value.shape()[0], before[a.0].value.shape()[1]);
                    let n = before[b.0].value.shape()[1];
                    if before[a.0].requires_grad {
                        let bt = before[b.0].value.transpose2();
                        accumulate(before, a, |d| {
                            matmul_accumulate(m, n, k, g, bt.data(), d);
                        });
                    }
                    if before[b.0].requires_grad {
                        let at = before[a.0].value.transpose2();
                        accumulate(before, b, |d| {
                            matmul_accumulate(k, m, n, at.data(), g, d);
                        });
                    }
                }
                Op::AddRow(a, row) => {
                    let (a, row) = (*a, *row);
                    let n = before[row.0].value.len();
                    accumulate(before, a, |d| axpy(d, g, 1.0));
                    accumulate(before, row, |d| {
                        for (idx, &gv) in g.iter().enumerate() {
                            d[idx % n] += gv;
                        }
                    });
                }
                Op::Exp(a) => {
                    let v = node.value.data();
                    accumulate(before, *a, |d| {
                        for ((o, &gv), &ev) in d.iter_mut().zip(g).zip(v) {
                            *o += gv * ev;
                        }
                    });
                }
                Op::Log(a) => {
                    let a = *a;
                    let x = before[a.0].value.data().to_vec();
                    accumulate(before, a, |d| {
                        for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(&x) {
                            *o += gv / xv;
                        }
                    });
                }
                Op::Square(a) => {
                    let a = *a;
                    let x = before[a.0].value.data().to_vec();
                    accumulate(before, a, |d| {
                        for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(&x) {
                            *o += gv * 2.0 * xv;
                        }
                    });
                }
                Op::Sqrt(a) => {
                    let v = node.value.data();
                    accumulate(before, *a, |d| {
                        for ((o, &gv), &sv) in d.iter_mut().zip(g).zip(v) {
                            *o += gv * 0.5 / sv;
                        }
                    });
                }
                Op::Relu(a) => {
                    let a = *a;
                    let x = before[a.0].value.data().to_vec();
                    accumulate(before, a, |d| {
                        for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(&x) {
                            if xv > 0.0 {
                                *o += gv;
                            }
                        }
                    });
                }
                Op::Softplus(a) => {
                    let a = *a;
                    let x = before[a.0].value.data().to_vec();
                    accumulate(before, a, |d| {
                        for ((o, &gv), &xv) in d.iter_mut().zip(g).zip(&x) {
                            *o += gv * sigmoid(xv);
                        }
                    });
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(before, *a, |d| axpy(d, g, c));
                }
                Op::AddScalar(a, _) => {
                    accumulate(before, *a, |d| axpy(d, g, 1.0));
                }
                Op::Sum(a) => {
                    let gv = g[0];
                    accumulate(before, *a, |d| {
                        for o in d.iter_mut() {
                            *o += gv;
                        }
                    });
                }
                Op::Mean(a) => {
                    let a = *a;
                    let gv = g[0] / before[a.0].value.len() as f64;
                    accumulate(before, a, |d| {
                        for o in d.iter_mut() {
                            *o += gv;
                        }
                    });
                }
                Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) => {
                    let a = *a;
                    let axis = *axis;
                    let shape = before[a.0].value.shape().to_vec();
                    let axis_len = shape[axis];
                    let outer: usize = shape[..axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let scale = match node.op {
                        Op::MeanAxis(..) => 1.0 / axis_len as f64,
                        _ => 1.0,
                    };
                    accumulate(before, a, |d| {
                        for o in 0..outer {
                            for x in 0..axis_len {
                                let base = (o * axis_len + x) * inner;
                                let obase = o * inner;
                                for i in 0..inner {
                                    d[base + i] += g[obase + i] * scale;
                                }
                            }
                        }
                    });
                }
                Op::SoftmaxCrossEntropy {
                    logits,
                    labels,
                    probs,
                } => {
                    let gv = g[0];
                    let b = labels.len();
                    let c = probs.shape()[1];
                    let p = probs.data();
                    let labels = labels.clone();
                    accumulate(before, *logits, |d| {
                        let inv_b = gv / b as f64;
                        for i in 0..b {
                            for j in 0..c {
                                let indicator = if labels[i] == j { 1.0 } else { 0.0 };
                                d[i * c + j] += (p[i * c + j] - indicator) * inv_b;
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

/// `d += g * c` elementwise.
fn axpy(d: &mut [f64], g: &[f64], c: f64) {
    for (o, &gv) in d.iter_mut().zip(g) {
        *o += gv * c;
    }
}

fn accumulate(nodes: &mut [Node], id: NodeId, f: impl FnOnce(&mut [f64])) {
    let n = &mut nodes[id.0];
    if !n.requires_grad {
        return;
    }
    if n.grad.is_none() {
        n.grad = Some(Tensor::zeros(n.value.shape()));
    }
    f(n.grad.as_mut().unwrap().data_mut());
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> NodeId {
        tape.leaf(Tensor::new(shape.to_vec(), data).unwrap())
    }

    #[test]
    fn add_and_backward() {
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let b = leaf(&mut tape, &[2], vec![10.0, 20.0]);
        let s = tape.add(a, b).unwrap();
        let root = tape.sum(s);
        tape.backward(root).unwrap();
        assert_eq!(tape.value(root).item(), 33.0);
        assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn shared_operand_accumulates_once_per_path() {
        // z = x*x + x, dz/dx = 2x + 1
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![1.0, -2.0, 0.5]);
        let xx = tape.mul(x, x).unwrap();
        let z = tape.add(xx, x).unwrap();
        let root = tape.sum(z);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, -3.0, 2.0]);
    }

    #[test]
    fn repeated_backward_is_identical() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 2], vec![0.3, -1.2, 2.0, 0.0]);
        let y = tape.relu(x);
        let s = tape.square(y);
        let root = tape.mean(s).unwrap();
        tape.backward(root).unwrap();
        let first: Vec<f64> = tape.grad(x).unwrap().data().to_vec();
        tape.backward(root).unwrap();
        let second: Vec<f64> = tape.grad(x).unwrap().data().to_vec();
        let as_bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(as_bits(&first), as_bits(&second));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![-1.0, 0.0, 2.0]);
        let y = tape.relu(x);
        let root = tape.sum(y);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn matmul_gradients_match_hand_values() {
        // f = sum(A @ B): dA = ones @ B^T, dB = A^T @ ones
        let mut tape = Tape::new();
        let a = leaf(&mut tape, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut tape, &[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = tape.matmul(a, b).unwrap();
        let root = tape.sum(c);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn add_row_broadcasts_and_sums_gradient() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], vec![0.0; 6]);
        let r = leaf(&mut tape, &[3], vec![1.0, 2.0, 3.0]);
        let y = tape.add_row(x, r).unwrap();
        assert_eq!(
            tape.value(y).data(),
            &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]
        );
        let root = tape.sum(y);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(r).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn cross_entropy_uniform_logits_is_ln_classes() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[2, 4], vec![0.0; 8]);
        let ce = tape.softmax_cross_entropy(z, &[1, 3]).unwrap();
        assert!((tape.value(ce).item() - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_is_stable_for_huge_logits() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[1, 3], vec![1000.0, -1000.0, 0.0]);
        let ce = tape.softmax_cross_entropy(z, &[0]).unwrap();
        let v = tape.value(ce).item();
        assert!(v.is_finite());
        assert!(v.abs() < 1e-12, "correct-class loss should be ~0, got {v}");
        tape.backward(ce).unwrap();
        assert!(tape.grad(z).unwrap().all_finite());
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[1, 2], vec![0.0, 0.0]);
        let ce = tape.softmax_cross_entropy(z, &[0]).unwrap();
        tape.backward(ce).unwrap();
        let g = tape.grad(z).unwrap().data();
        assert!((g[0] - (-0.5)).abs() < 1e-12);
        assert!((g[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let mut tape = Tape::new();
        let z = leaf(&mut tape, &[2, 3], vec![0.0; 6]);
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[0, 3]),
            Err(GradError::LabelOutOfRange { label: 3, classes: 3 })
        ));
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[0]),
            Err(GradError::LabelCountMismatch { .. })
        ));
    }

    #[test]
    fn log_rejects_nonpositive() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 0.0]);
        assert!(matches!(tape.log(x), Err(GradError::NonPositive { .. })));
    }

    #[test]
    fn axis_reductions() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let cols = tape.sum_axis(x, 0).unwrap();
        assert_eq!(tape.value(cols).shape(), &[3]);
        assert_eq!(tape.value(cols).data(), &[5.0, 7.0, 9.0]);
        let rows = tape.mean_axis(x, 1).unwrap();
        assert_eq!(tape.value(rows).data(), &[2.0, 5.0]);
        assert!(matches!(
            tape.sum_axis(x, 2),
            Err(GradError::AxisOutOfRange { axis: 2, rank: 2, .. })
        ));
        let root = tape.sum(rows);
        tape.backward(root).unwrap();
        let g = tape.grad(x).unwrap().data();
        assert!(g.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn constants_are_skipped_in_backward() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let y = tape.mul(x, c).unwrap();
        let root = tape.sum(y);
        tape.backward(root).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[3.0, 4.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[2], vec![1.0, 2.0]);
        let y = tape.square(x);
        assert!(matches!(
            tape.backward(y),
            Err(GradError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn softplus_matches_reference_points() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[3], vec![0.0, 100.0, -100.0]);
        let y = tape.softplus(x);
        let v = tape.value(y).data();
        assert!((v[0] - 2.0f64.ln()).abs() < 1e-15);
        assert!((v[1] - 100.0).abs() < 1e-12);
        assert!(v[2] > 0.0 && v[2] < 1e-40);
    }
}

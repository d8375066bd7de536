//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] is built during one forward pass and consumed by one
//! [`Tape::backward`] call. Nodes are appended in execution order, so
//! operands always precede their users and the backward sweep is a single
//! reverse iteration. Tapes are not reusable: a second `backward` is
//! rejected, and the caller starts a fresh tape for the next step.

use super::matrix::{softmax_slice, Matrix};
use super::NumericsError;

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    /// Sum of all entries into a 1x1 scalar.
    Sum(NodeId),
    ConcatCols(Vec<NodeId>),
    LogSoftmaxRow(NodeId),
    CrossEntropyLogits(NodeId, usize),
    /// Select column `i` of a 1xN row into a 1x1 scalar.
    Pick(NodeId, usize),
}

struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar_value(&self, id: NodeId) -> f64 {
        let v = self.value(id);
        debug_assert_eq!(v.shape(), (1, 1));
        v.values()[0]
    }

    /// Accumulated gradient of a node; zero until `backward` has run.
    pub fn grad(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].grad
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input or parameter leaf. Gradients accumulate here.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Record a constant leaf. Identical to `leaf`; the name marks intent
    /// (nobody reads its gradient).
    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_constant(&mut self, v: f64) -> NodeId {
        self.constant(Matrix::scalar(v))
    }

    fn shape_err(&self, op: &'static str, a: NodeId, b: NodeId) -> NumericsError {
        NumericsError::ShapeMismatch {
            op,
            lhs: format!("{:?}", self.value(a).shape()),
            rhs: format!("{:?}", self.value(b).shape()),
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        if self.value(a).cols() != self.value(b).rows() {
            return Err(self.shape_err("matmul", a, b));
        }
        let value = self.value(a).matmul_unchecked(self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    fn elementwise_pair(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, NumericsError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.shape_err(op_name, a, b));
        }
        let (rows, cols) = self.value(a).shape();
        let data = self
            .value(a)
            .values()
            .iter()
            .zip(self.value(b).values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(Matrix::from_vec(rows, cols, data), op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise_pair("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.elementwise_pair("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let value = self.value(a).map(|v| v * factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).values().iter().sum();
        self.push(Matrix::scalar(total), Op::Sum(a))
    }

    /// Join matrices left to right. All operands must share the row count.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NumericsError> {
        assert!(!parts.is_empty(), "concat_cols needs at least one operand");
        let rows = self.value(parts[0]).rows();
        for &p in &parts[1..] {
            if self.value(p).rows() != rows {
                return Err(self.shape_err("concat_cols", parts[0], p));
            }
        }
        let total_cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total_cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        Ok(self.push(
            Matrix::from_vec(rows, total_cols, data),
            Op::ConcatCols(parts.to_vec()),
        ))
    }

    /// Max-subtracted log-softmax of a 1xN row.
    pub fn log_softmax_row(&mut self, a: NodeId) -> Result<NodeId, NumericsError> {
        let v = self.value(a);
        if v.rows() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "log_softmax_row",
                lhs: format!("{:?}", v.shape()),
                rhs: "(1, n)".to_string(),
            });
        }
        let row = v.row(0);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let data: Vec<f64> = row.iter().map(|&x| x - max - log_sum).collect();
        Ok(self.push(Matrix::row_vector(data), Op::LogSoftmaxRow(a)))
    }

    /// -log softmax(logits)[label] as a 1x1 scalar.
    pub fn cross_entropy_from_logits(
        &mut self,
        logits: NodeId,
        label: usize,
    ) -> Result<NodeId, NumericsError> {
        let v = self.value(logits);
        if v.rows() != 1 {
            return Err(NumericsError::ShapeMismatch {
                op: "cross_entropy_from_logits",
                lhs: format!("{:?}", v.shape()),
                rhs: "(1, C)".to_string(),
            });
        }
        let classes = v.cols();
        if label >= classes {
            return Err(NumericsError::LabelOutOfRange { label, classes });
        }
        let row = v.row(0);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let loss = -(row[label] - max - log_sum);
        Ok(self.push(Matrix::scalar(loss), Op::CrossEntropyLogits(logits, label)))
    }

    /// Select entry `index` of a 1xN row as a 1x1 scalar.
    pub fn pick(&mut self, a: NodeId, index: usize) -> Result<NodeId, NumericsError> {
        let v = self.value(a);
        if v.rows() != 1 || index >= v.cols() {
            return Err(NumericsError::ShapeMismatch {
                op: "pick",
                lhs: format!("{:?}[{index}]", v.shape()),
                rhs: "(1, n), index < n".to_string(),
            });
        }
        let value = v.row(0)[index];
        Ok(self.push(Matrix::scalar(value), Op::Pick(a, index)))
    }

    /// Reverse accumulation from a scalar seed node. The tape is consumed:
    /// a second call is rejected.
    pub fn backward(&mut self, seed: NodeId) -> Result<(), NumericsError> {
        if self.consumed {
            return Err(NumericsError::TapeConsumed);
        }
        let (rows, cols) = self.value(seed).shape();
        if (rows, cols) != (1, 1) {
            return Err(NumericsError::SeedNotScalar { rows, cols });
        }
        self.consumed = true;
        self.nodes[seed.0].grad = Matrix::scalar(1.0);

        for i in (0..self.nodes.len()).rev() {
            // Skip nodes no gradient reached; keeps non-ancestors exactly zero.
            if self.nodes[i].grad.values().iter().all(|&g| g == 0.0) {
                continue;
            }
            self.backprop_node(i);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize) {
        let out_grad = self.nodes[i].grad.clone();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let da = out_grad.matmul_unchecked(&self.nodes[b.0].value.transpose());
                let db = self.nodes[a.0].value.transpose().matmul_unchecked(&out_grad);
                self.nodes[a.0].grad.add_assign(&da);
                self.nodes[b.0].grad.add_assign(&db);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.nodes[a.0].grad.add_assign(&out_grad);
                self.nodes[b.0].grad.add_assign(&out_grad);
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.nodes[a.0].grad.add_assign(&out_grad);
                let neg = out_grad.map(|g| -g);
                self.nodes[b.0].grad.add_assign(&neg);
            }
            Op::Hadamard(a, b) => {
                let (a, b) = (*a, *b);
                let da = elementwise_mul(&out_grad, &self.nodes[b.0].value);
                let db = elementwise_mul(&out_grad, &self.nodes[a.0].value);
                self.nodes[a.0].grad.add_assign(&da);
                self.nodes[b.0].grad.add_assign(&db);
            }
            Op::Scale(a, factor) => {
                let (a, factor) = (*a, *factor);
                let da = out_grad.map(|g| g * factor);
                self.nodes[a.0].grad.add_assign(&da);
            }
            Op::Tanh(a) => {
                let a = *a;
                let da = zip_map(&out_grad, &self.nodes[i].value, |g, y| g * (1.0 - y * y));
                self.nodes[a.0].grad.add_assign(&da);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let da = zip_map(&out_grad, &self.nodes[i].value, |g, y| g * y * (1.0 - y));
                self.nodes[a.0].grad.add_assign(&da);
            }
            Op::Exp(a) => {
                let a = *a;
                let da = zip_map(&out_grad, &self.nodes[i].value, |g, y| g * y);
                self.nodes[a.0].grad.add_assign(&da);
            }
            Op::Sum(a) => {
                let a = *a;
                let g = out_grad.values()[0];
                let shape = self.nodes[a.0].value.shape();
                let da = Matrix::from_vec(shape.0, shape.1, vec![g; shape.0 * shape.1]);
                self.nodes[a.0].grad.add_assign(&da);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let rows = out_grad.rows();
                let mut col_offset = 0;
                for p in parts {
                    let pc = self.nodes[p.0].value.cols();
                    let mut dp = Matrix::zeros(rows, pc);
                    for r in 0..rows {
                        for c in 0..pc {
                            dp.set(r, c, out_grad.get(r, col_offset + c));
                        }
                    }
                    self.nodes[p.0].grad.add_assign(&dp);
                    col_offset += pc;
                }
            }
            Op::LogSoftmaxRow(a) => {
                let a = *a;
                // d/dx_j = g_j - softmax(x)_j * sum(g)
                let probs = softmax_slice(self.nodes[a.0].value.row(0));
                let g_sum: f64 = out_grad.values().iter().sum();
                let da: Vec<f64> = out_grad
                    .values()
                    .iter()
                    .zip(&probs)
                    .map(|(&g, &p)| g - p * g_sum)
                    .collect();
                self.nodes[a.0].grad.add_assign(&Matrix::row_vector(da));
            }
            Op::CrossEntropyLogits(a, label) => {
                let (a, label) = (*a, *label);
                let g = out_grad.values()[0];
                let mut da: Vec<f64> = softmax_slice(self.nodes[a.0].value.row(0));
                da[label] -= 1.0;
                for v in &mut da {
                    *v *= g;
                }
                self.nodes[a.0].grad.add_assign(&Matrix::row_vector(da));
            }
            Op::Pick(a, index) => {
                let (a, index) = (*a, *index);
                let g = out_grad.values()[0];
                let mut da = Matrix::zeros(1, self.nodes[a.0].value.cols());
                da.set(0, index, g);
                self.nodes[a.0].grad.add_assign(&da);
            }
        }
    }
}

fn elementwise_mul(a: &Matrix, b: &Matrix) -> Matrix {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::central_diff_check;
    use crate::rng::Rng;

    #[test]
    fn square_gradient() {
        // f(x) = x^2 at x = 3 -> df/dx = 6
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(3.0));
        let y = tape.hadamard(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).values(), &[6.0]);
    }

    #[test]
    fn non_ancestor_gradient_is_exactly_zero() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(2.0));
        let y = tape.leaf(Matrix::scalar(5.0));
        let out = tape.scale(x, 1.0);
        tape.backward(out).unwrap();
        assert_eq!(tape.grad(y).values(), &[0.0]);
        assert_eq!(tape.grad(x).values(), &[1.0]);
    }

    #[test]
    fn backward_twice_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::scalar(1.0));
        let y = tape.scale(x, 2.0);
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(NumericsError::TapeConsumed)));
    }

    #[test]
    fn backward_needs_scalar_seed() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(vec![1.0, 2.0]));
        let err = tape.backward(x).unwrap_err();
        assert!(matches!(err, NumericsError::SeedNotScalar { rows: 1, cols: 2 }));
    }

    #[test]
    fn matmul_shape_mismatch_rejected() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::zeros(2, 3));
        let b = tape.leaf(Matrix::zeros(2, 3));
        assert!(matches!(
            tape.matmul(a, b),
            Err(NumericsError::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn matmul_values_and_sum_gradient() {
        // sum(a @ b) for 5x4 by 4x3: d/da = ones(5,3) @ b^T
        let mut rng = Rng::from_seed(11);
        let mut tape = Tape::new();
        let a_m = Matrix::random_uniform(5, 4, 1.0, &mut rng);
        let b_m = Matrix::random_uniform(4, 3, 1.0, &mut rng);
        let a = tape.leaf(a_m.clone());
        let b = tape.leaf(b_m.clone());
        let prod = tape.matmul(a, b).unwrap();
        let total = tape.sum(prod);
        tape.backward(total).unwrap();
        let expected = Matrix::from_vec(5, 3, vec![1.0; 15]).matmul_unchecked(&b_m.transpose());
        for (g, e) in tape.grad(a).values().iter().zip(expected.values()) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn concat_cols_joins_left_to_right() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::scalar(1.0));
        let b = tape.leaf(Matrix::scalar(2.0));
        let c = tape.leaf(Matrix::scalar(3.0));
        let joined = tape.concat_cols(&[a, b, c]).unwrap();
        assert_eq!(tape.value(joined).values(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn concat_cols_gradient_slices_back() {
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::row_vector(vec![1.0, 2.0]));
        let b = tape.leaf(Matrix::row_vector(vec![3.0]));
        let joined = tape.concat_cols(&[a, b]).unwrap();
        let weights = tape.constant(Matrix::row_vector(vec![10.0, 20.0, 30.0]));
        let weighted = tape.hadamard(joined, weights).unwrap();
        let total = tape.sum(weighted);
        tape.backward(total).unwrap();
        assert_eq!(tape.grad(a).values(), &[10.0, 20.0]);
        assert_eq!(tape.grad(b).values(), &[30.0]);
    }

    #[test]
    fn tanh_sigmoid_trivial_points() {
        let mut tape = Tape::new();
        let zero = tape.leaf(Matrix::scalar(0.0));
        let t = tape.tanh(zero);
        let s = tape.sigmoid(zero);
        assert_eq!(tape.value(t).values(), &[0.0]);
        assert_eq!(tape.value(s).values(), &[0.5]);
    }

    #[test]
    fn log_softmax_uniform_and_stability() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(vec![0.0, 0.0, 0.0]));
        let ls = tape.log_softmax_row(x).unwrap();
        for v in tape.value(ls).values() {
            assert!((v - -(3.0f64.ln())).abs() < 1e-15);
        }
        let big = tape.leaf(Matrix::row_vector(vec![1000.0, 0.0, 0.0]));
        let ls2 = tape.log_softmax_row(big).unwrap();
        assert!(tape.value(ls2).values().iter().all(|v| v.is_finite()));
        assert!(tape.value(ls2).values()[0].abs() < 1e-12);
    }

    #[test]
    fn log_softmax_exp_sums_to_one() {
        let mut rng = Rng::from_seed(21);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let x = tape.leaf(Matrix::random_uniform(1, 3, 2.0, &mut rng));
            let ls = tape.log_softmax_row(x).unwrap();
            let total: f64 = tape.value(ls).values().iter().map(|v| v.exp()).sum();
            assert!((total - 1.0).abs() < 1e-12, "sum {total}");
        }
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(vec![0.7; 4]));
        let ce = tape.cross_entropy_from_logits(x, 2).unwrap();
        assert!((tape.scalar_value(ce) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_aligned_huge_logit() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(vec![500.0, 0.0, 0.0]));
        let ce = tape.cross_entropy_from_logits(x, 0).unwrap();
        assert!(tape.scalar_value(ce).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::row_vector(vec![0.0, 0.0]));
        assert!(matches!(
            tape.cross_entropy_from_logits(x, 2),
            Err(NumericsError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    // Finite-difference oracles over random inputs in [-1, 1].

    #[test]
    fn gradcheck_cross_entropy() {
        let mut rng = Rng::from_seed(31);
        let x0 = Matrix::random_uniform(1, 5, 1.0, &mut rng);
        let report = central_diff_check(
            &[("logits", x0)],
            |mats| -> Result<_, NumericsError> {
                let mut tape = Tape::new();
                let x = tape.leaf(mats[0].clone());
                let ce = tape.cross_entropy_from_logits(x, 3)?;
                Ok((tape, ce, vec![x]))
            },
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn gradcheck_mixed_expression() {
        // sum(tanh(a @ b) . sigmoid(a @ b)) exercises matmul, tanh,
        // sigmoid and hadamard adjoints together.
        let mut rng = Rng::from_seed(37);
        let a0 = Matrix::random_uniform(3, 4, 1.0, &mut rng);
        let b0 = Matrix::random_uniform(4, 2, 1.0, &mut rng);
        let report = central_diff_check(
            &[("a", a0), ("b", b0)],
            |mats| -> Result<_, NumericsError> {
                let mut tape = Tape::new();
                let a = tape.leaf(mats[0].clone());
                let b = tape.leaf(mats[1].clone());
                let prod = tape.matmul(a, b)?;
                let t = tape.tanh(prod);
                let s = tape.sigmoid(prod);
                let h = tape.hadamard(t, s)?;
                let total = tape.sum(h);
                Ok((tape, total, vec![a, b]))
            },
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "rel err {}", report.max_rel_err);
    }
}

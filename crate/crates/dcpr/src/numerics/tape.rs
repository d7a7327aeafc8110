//! Reverse-mode automatic differentiation over matrix operations.
//!
//! A `Tape` records a computation as a flat list of nodes; `backward` walks
//! it in reverse, accumulating vector-Jacobian products. The op vocabulary
//! is exactly what the denoisers and loss need — nothing speculative.
//!
//! Shape errors at graph-build time panic (programming errors); calling
//! `backward` on a non-scalar node is a recoverable [`TapeError`] because it
//! can arise from a mis-wired caller graph.

use thiserror::Error;

use super::matrix::{Matrix, Real};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("backward requires a 1x1 loss node, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}

enum Op<F: Real> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, F),
    /// `mat + row` with the 1xC row added to every row of mat.
    AddRowBroadcast { mat: NodeId, row: NodeId },
    Transpose(NodeId),
    RowSoftmax(NodeId),
    /// Column sums: RxC -> 1xC.
    SumRows(NodeId),
    /// Total sum: RxC -> 1x1.
    SumAll(NodeId),
    /// Row lookup into an embedding table; backward scatter-adds.
    Gather { table: NodeId, indices: Vec<usize> },
    Tanh(NodeId),
    LogSigmoid(NodeId),
    /// Element-wise product with a constant matrix (dropout masks).
    MulConst(NodeId, Matrix<F>),
    /// `coeff_a * a + coeff_b * b` where a and b are 1x1 scalars and the
    /// coefficient matrices share the output shape (spatiotemporal bias).
    ScalarCombine { a: NodeId, b: NodeId, coeff_a: Matrix<F>, coeff_b: Matrix<F> },
}

struct Node<F: Real> {
    value: Matrix<F>,
    op: Op<F>,
    trainable: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`NodeId`].
#[derive(Debug)]
pub struct Gradients<F: Real> {
    grads: Vec<Option<Matrix<F>>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient of the loss with respect to a node, if the node influenced
    /// the loss.
    pub fn get(&self, id: NodeId) -> Option<&Matrix<F>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Matrix<F>> {
        self.grads[id.0].take()
    }
}

/// Recorded computation graph.
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Matrix<F> {
        &self.nodes[id.0].value
    }

    pub fn is_trainable(&self, id: NodeId) -> bool {
        self.nodes[id.0].trainable
    }

    fn push(&mut self, value: Matrix<F>, op: Op<F>, trainable: bool) -> NodeId {
        self.nodes.push(Node { value, op, trainable });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input: participates in the graph but reports no gradient of
    /// its own (gradients still flow *through* it).
    pub fn leaf(&mut self, value: Matrix<F>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable input: `backward` accumulates a gradient for it.
    pub fn param(&mut self, value: Matrix<F>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b), false)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).add(self.value(b));
        self.push(v, Op::Add(a, b), false)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).sub(self.value(b));
        self.push(v, Op::Sub(a, b), false)
    }

    pub fn scale(&mut self, a: NodeId, s: F) -> NodeId {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s), false)
    }

    pub fn add_row_broadcast(&mut self, mat: NodeId, row: NodeId) -> NodeId {
        let v = self.value(mat).add_row_broadcast(self.value(row));
        self.push(v, Op::AddRowBroadcast { mat, row }, false)
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a), false)
    }

    pub fn row_softmax(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).row_softmax();
        self.push(v, Op::RowSoftmax(a), false)
    }

    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_rows();
        self.push(v, Op::SumRows(a), false)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).sum_all();
        self.push(v, Op::SumAll(a), false)
    }

    pub fn gather(&mut self, table: NodeId, indices: &[usize]) -> NodeId {
        let v = self.value(table).gather_rows(indices);
        self.push(v, Op::Gather { table, indices: indices.to_vec() }, false)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(|x| x.tanh());
        self.push(v, Op::Tanh(a), false)
    }

    /// Numerically stable log-sigmoid, element-wise.
    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).map(log_sigmoid_scalar);
        self.push(v, Op::LogSigmoid(a), false)
    }

    pub fn mul_const(&mut self, a: NodeId, mask: Matrix<F>) -> NodeId {
        let v = self.value(a).hadamard(&mask);
        self.push(v, Op::MulConst(a, mask), false)
    }

    /// Build `coeff_a * a + coeff_b * b` with scalar nodes `a`, `b` and
    /// constant coefficient matrices of the output shape.
    pub fn scalar_combine(
        &mut self,
        a: NodeId,
        b: NodeId,
        coeff_a: Matrix<F>,
        coeff_b: Matrix<F>,
    ) -> NodeId {
        assert_eq!(coeff_a.shape(), coeff_b.shape(), "scalar_combine coefficient shapes differ");
        let sa = self.value(a).scalar();
        let sb = self.value(b).scalar();
        let v = coeff_a.scale(sa).add(&coeff_b.scale(sb));
        self.push(v, Op::ScalarCombine { a, b, coeff_a, coeff_b }, false)
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients;
    /// only nodes that influence the loss carry one.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<F>, TapeError> {
        let (r, c) = self.value(loss).shape();
        if (r, c) != (1, 1) {
            return Err(TapeError::NonScalarLoss { rows: r, cols: c });
        }
        let mut grads: Vec<Option<Matrix<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![F::one()]));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose());
                    let gb = self.value(*a).transpose().matmul(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-F::one()));
                }
                Op::Scale(a, s) => {
                    accumulate(&mut grads, *a, g.scale(*s));
                }
                Op::AddRowBroadcast { mat, row } => {
                    accumulate(&mut grads, *row, g.sum_rows());
                    accumulate(&mut grads, *mat, g);
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, g.transpose());
                }
                Op::RowSoftmax(a) => {
                    // d/dx softmax: ga_j = s_j * (g_j - sum_k g_k s_k) per row.
                    let s = &self.nodes[i].value;
                    let mut ga = Matrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let mut inner = F::zero();
                        for c in 0..s.cols() {
                            inner = inner + g.get(r, c) * s.get(r, c);
                        }
                        for c in 0..s.cols() {
                            ga.set(r, c, s.get(r, c) * (g.get(r, c) - inner));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumRows(a) => {
                    let (ar, ac) = self.value(*a).shape();
                    let mut ga = Matrix::zeros(ar, ac);
                    for r in 0..ar {
                        for c in 0..ac {
                            ga.set(r, c, g.get(0, c));
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (ar, ac) = self.value(*a).shape();
                    let gs = g.scalar();
                    let ga = Matrix::from_vec(ar, ac, vec![gs; ar * ac]);
                    accumulate(&mut grads, *a, ga);
                }
                Op::Gather { table, indices } => {
                    let (tr, tc) = self.value(*table).shape();
                    let mut gt = Matrix::zeros(tr, tc);
                    for (out_row, &src) in indices.iter().enumerate() {
                        for c in 0..tc {
                            let v = gt.get(src, c) + g.get(out_row, c);
                            gt.set(src, c, v);
                        }
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    let ga = g.hadamard(&y.map(|v| F::one() - v * v));
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSigmoid(a) => {
                    // d/dx log sigma(x) = sigma(-x), computed stably.
                    let x = self.value(*a);
                    let ga = g.hadamard(&x.map(sigmoid_neg_scalar));
                    accumulate(&mut grads, *a, ga);
                }
                Op::MulConst(a, mask) => {
                    accumulate(&mut grads, *a, g.hadamard(mask));
                }
                Op::ScalarCombine { a, b, coeff_a, coeff_b } => {
                    let ga = coeff_a.hadamard(&g).sum_all();
                    let gb = coeff_b.hadamard(&g).sum_all();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<F: Real>(grads: &mut [Option<Matrix<F>>], id: NodeId, contribution: Matrix<F>) {
    match &mut grads[id.0] {
        Some(g) => g.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

/// `ln(sigma(x))` without overflow on either tail.
fn log_sigmoid_scalar<F: Real>(x: F) -> F {
    if x >= F::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `sigma(-x)` without overflow on either tail.
fn sigmoid_neg_scalar<F: Real>(x: F) -> F {
    if x >= F::zero() {
        let e = (-x).exp();
        e / (F::one() + e)
    } else {
        F::one() / (F::one() + x.exp())
    }
}

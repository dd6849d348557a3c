//! Reverse-mode differentiation on a per-forward tape.
//!
//! A [`Tape`] records one forward expression; [`Tape::backward`] replays it in
//! reverse creation order and accumulates gradients into every node. The tape
//! is built, differentiated once, read, and dropped — no graph reuse, no
//! higher-order derivatives.
//!
//! Gradient accumulation order is fixed by node index, so two tapes built
//! from the same inputs produce bit-identical gradients. Leaves that the loss
//! never reaches keep an exactly-zero gradient, which is what the hard-routing
//! audits assert on.

use crate::error::{Error, Result};
use crate::numcore::matrix::{self, ConvMeta, Matrix};

/// Handle to one node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Conv1d { x: NodeId, kernel: NodeId, bias: NodeId, meta: ConvMeta },
    Relu { x: NodeId },
    SoftmaxRows { x: NodeId },
    MeanOverTime { x: NodeId },
    Add { a: NodeId, b: NodeId },
    AddRow { x: NodeId, row: NodeId },
    Scale { x: NodeId, c: f64 },
    LinComb { mats: Vec<NodeId>, coeffs: NodeId, indices: Vec<usize> },
    ScaleRowsSelect { x: NodeId, gate: NodeId, col: usize, selected: Vec<bool> },
    MseVs { pred: NodeId, target: Matrix },
    DotConst { x: NodeId, coeffs: Matrix, scale: f64 },
}

struct Node {
    value: Matrix,
    grad: Option<Matrix>,
    op: Op,
}

/// One forward computation, taped for a single backward pass.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(64),
            backward_done: false,
        }
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        id
    }

    /// Insert an input or parameter value.
    pub fn leaf(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Gradient of the loss w.r.t. this node. Zero matrix when the node does
    /// not influence the loss. Errors until `backward` has run.
    pub fn grad(&self, id: NodeId) -> Result<Matrix> {
        if !self.backward_done {
            return Err(Error::AuditFailure(
                "grad() queried before backward()".into(),
            ));
        }
        let n = &self.nodes[id.0];
        Ok(match &n.grad {
            Some(g) => g.clone(),
            None => Matrix::zeros(n.value.rows(), n.value.cols()),
        })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matrix::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul { a, b }))
    }

    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId, bias: NodeId, meta: ConvMeta) -> Result<NodeId> {
        let v = matrix::conv1d(self.value(x), self.value(kernel), self.value(bias), &meta)?;
        Ok(self.push(v, Op::Conv1d { x, kernel, bias, meta }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = matrix::relu(self.value(x));
        self.push(v, Op::Relu { x })
    }

    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = matrix::softmax_rows(self.value(x));
        self.push(v, Op::SoftmaxRows { x })
    }

    pub fn mean_over_time(&mut self, x: NodeId) -> Result<NodeId> {
        let v = matrix::mean_over_time(self.value(x))?;
        Ok(self.push(v, Op::MeanOverTime { x }))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = matrix::add(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::Add { a, b }))
    }

    /// Broadcast-add a `1 x C` row node to every row of `x`.
    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> Result<NodeId> {
        let v = matrix::add_row_broadcast(self.value(x), self.value(row))?;
        Ok(self.push(v, Op::AddRow { x, row }))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let v = matrix::scale(self.value(x), c);
        self.push(v, Op::Scale { x, c })
    }

    /// `sum_t coeffs[indices[t]] * mats[t]` where `coeffs` is a `1 x M` node.
    /// Differentiable in the matrices and in the selected coefficients.
    pub fn lincomb(&mut self, mats: &[NodeId], coeffs: NodeId, indices: &[usize]) -> Result<NodeId> {
        let mat_refs: Vec<&Matrix> = mats.iter().map(|&m| self.value(m)).collect();
        let v = matrix::lincomb(&mat_refs, self.value(coeffs), indices)?;
        Ok(self.push(
            v,
            Op::LinComb {
                mats: mats.to_vec(),
                coeffs,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Row t of the output is `gate[t, col] * x[t, :]` where `selected[t]`,
    /// else exactly zero.
    pub fn scale_rows_select(
        &mut self,
        x: NodeId,
        gate: NodeId,
        col: usize,
        selected: Vec<bool>,
    ) -> Result<NodeId> {
        let v = matrix::scale_rows_select(self.value(x), self.value(gate), col, &selected)?;
        Ok(self.push(v, Op::ScaleRowsSelect { x, gate, col, selected }))
    }

    /// Mean squared error of `pred` against a constant target, as a 1x1 node.
    pub fn mse_vs(&mut self, pred: NodeId, target: &Matrix) -> Result<NodeId> {
        let v = matrix::mse(self.value(pred), target)?;
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![v])?,
            Op::MseVs {
                pred,
                target: target.clone(),
            },
        ))
    }

    /// `scale * <coeffs, x>` against constant coefficients, as a 1x1 node.
    pub fn dot_const(&mut self, x: NodeId, coeffs: &Matrix, scale: f64) -> Result<NodeId> {
        let v = matrix::dot_const(self.value(x), coeffs, scale)?;
        Ok(self.push(
            Matrix::from_vec(1, 1, vec![v])?,
            Op::DotConst {
                x,
                coeffs: coeffs.clone(),
                scale,
            },
        ))
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.get(0, 0)
    }

    fn grad_mut(&mut self, id: NodeId) -> &mut Matrix {
        let (rows, cols) = self.nodes[id.0].value.shape();
        self.nodes[id.0]
            .grad
            .get_or_insert_with(|| Matrix::zeros(rows, cols))
    }

    fn add_grad(&mut self, id: NodeId, g: &Matrix) {
        let tgt = self.grad_mut(id);
        for (t, &gv) in tgt.data_mut().iter_mut().zip(g.data()) {
            *t += gv;
        }
    }

    /// Run the reverse pass from a 1x1 loss node. May be called once per tape.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        let (r, c) = self.nodes[loss.0].value.shape();
        if (r, c) != (1, 1) {
            return Err(Error::NonScalarLoss { rows: r, cols: c });
        }
        self.nodes[loss.0].grad = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..self.nodes.len()).rev() {
            let up = match &self.nodes[i].grad {
                Some(g) => g.clone(),
                None => continue,
            };
            // Take the op apart without borrowing self across the dispatch.
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let mut ga = Matrix::zeros(self.nodes[a.0].value.rows(), self.nodes[a.0].value.cols());
                    let mut gb = Matrix::zeros(self.nodes[b.0].value.rows(), self.nodes[b.0].value.cols());
                    matrix::matmul_backward(
                        &self.nodes[a.0].value,
                        &self.nodes[b.0].value,
                        &up,
                        &mut ga,
                        &mut gb,
                    );
                    self.add_grad(a, &ga);
                    self.add_grad(b, &gb);
                }
                Op::Conv1d { x, kernel, bias, meta } => {
                    let (x, kernel, bias, meta) = (*x, *kernel, *bias, *meta);
                    let mut gx = Matrix::zeros(self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                    let mut gk = Matrix::zeros(
                        self.nodes[kernel.0].value.rows(),
                        self.nodes[kernel.0].value.cols(),
                    );
                    let mut gb = Matrix::zeros(1, meta.out_channels);
                    matrix::conv1d_backward(
                        &self.nodes[x.0].value,
                        &self.nodes[kernel.0].value,
                        &meta,
                        &up,
                        &mut gx,
                        &mut gk,
                        &mut gb,
                    );
                    self.add_grad(x, &gx);
                    self.add_grad(kernel, &gk);
                    self.add_grad(bias, &gb);
                }
                Op::Relu { x } => {
                    let x = *x;
                    let mut gx = Matrix::zeros(up.rows(), up.cols());
                    matrix::relu_backward(&self.nodes[x.0].value, &up, &mut gx);
                    self.add_grad(x, &gx);
                }
                Op::SoftmaxRows { x } => {
                    let x = *x;
                    let mut gx = Matrix::zeros(up.rows(), up.cols());
                    matrix::softmax_rows_backward(&self.nodes[i].value, &up, &mut gx);
                    self.add_grad(x, &gx);
                }
                Op::MeanOverTime { x } => {
                    let x = *x;
                    let t = self.nodes[x.0].value.rows();
                    let inv = 1.0 / t as f64;
                    let mut gx = Matrix::zeros(t, up.cols());
                    for r in 0..t {
                        let row = gx.row_mut(r);
                        for (j, &uv) in up.data().iter().enumerate() {
                            row[j] = uv * inv;
                        }
                    }
                    self.add_grad(x, &gx);
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    self.add_grad(a, &up);
                    self.add_grad(b, &up);
                }
                Op::AddRow { x, row } => {
                    let (x, row) = (*x, *row);
                    self.add_grad(x, &up);
                    let mut gr = Matrix::zeros(1, up.cols());
                    for r in 0..up.rows() {
                        let urow = up.row(r);
                        for (j, &uv) in urow.iter().enumerate() {
                            gr.data_mut()[j] += uv;
                        }
                    }
                    self.add_grad(row, &gr);
                }
                Op::Scale { x, c } => {
                    let (x, c) = (*x, *c);
                    let g = matrix::scale(&up, c);
                    self.add_grad(x, &g);
                }
                Op::LinComb { mats, coeffs, indices } => {
                    let mats = mats.clone();
                    let coeffs = *coeffs;
                    let indices = indices.clone();
                    let mut gc = Matrix::zeros(1, self.nodes[coeffs.0].value.cols());
                    for (t, &m) in mats.iter().enumerate() {
                        let w = self.nodes[coeffs.0].value.get(0, indices[t]);
                        let gm = matrix::scale(&up, w);
                        // d/d coeff = <up, mat>
                        let mut dot = 0.0;
                        for (uv, mv) in up.data().iter().zip(self.nodes[m.0].value.data()) {
                            dot += uv * mv;
                        }
                        gc.data_mut()[indices[t]] += dot;
                        self.add_grad(m, &gm);
                    }
                    self.add_grad(coeffs, &gc);
                }
                Op::ScaleRowsSelect { x, gate, col, selected } => {
                    let (x, gate, col) = (*x, *gate, *col);
                    let selected = selected.clone();
                    let mut gx = Matrix::zeros(up.rows(), up.cols());
                    let mut gg = Matrix::zeros(
                        self.nodes[gate.0].value.rows(),
                        self.nodes[gate.0].value.cols(),
                    );
                    for r in 0..up.rows() {
                        if selected[r] {
                            let w = self.nodes[gate.0].value.get(r, col);
                            let x_row = self.nodes[x.0].value.row(r).to_vec();
                            let u_row = up.row(r);
                            let gx_row = gx.row_mut(r);
                            let mut dot = 0.0;
                            for (j, &uv) in u_row.iter().enumerate() {
                                gx_row[j] = w * uv;
                                dot += uv * x_row[j];
                            }
                            gg.set(r, col, dot);
                        }
                    }
                    self.add_grad(x, &gx);
                    self.add_grad(gate, &gg);
                }
                Op::MseVs { pred, target } => {
                    let pred = *pred;
                    let target = target.clone();
                    let u = up.get(0, 0);
                    let n = target.len() as f64;
                    let mut gp = Matrix::zeros(target.rows(), target.cols());
                    for (j, g) in gp.data_mut().iter_mut().enumerate() {
                        *g = u * 2.0 * (self.nodes[pred.0].value.data()[j] - target.data()[j]) / n;
                    }
                    self.add_grad(pred, &gp);
                }
                Op::DotConst { x, coeffs, scale } => {
                    let x = *x;
                    let s = *scale;
                    let coeffs = coeffs.clone();
                    let u = up.get(0, 0);
                    let g = matrix::scale(&coeffs, u * s);
                    self.add_grad(x, &g);
                }
            }
        }
        self.backward_done = true;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_twice_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::filled(1, 1, 2.0));
        let y = tape.matmul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::BackwardAlreadyRun)));
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(2, 2));
        assert!(matches!(
            tape.backward(x),
            Err(Error::NonScalarLoss { rows: 2, cols: 2 })
        ));
    }

    #[test]
    fn grad_before_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::zeros(1, 1));
        assert!(tape.grad(x).is_err());
    }

    #[test]
    fn matmul_grads_match_hand_derivation() {
        // loss = sum over entries of a.b realized through mse against 0 would
        // square; use dot_const with ones for a plain sum.
        let mut tape = Tape::new();
        let a = tape.leaf(Matrix::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let b = tape.leaf(Matrix::from_vec(2, 1, vec![3.0, 4.0]).unwrap());
        let y = tape.matmul(a, b).unwrap();
        let loss = tape.dot_const(y, &Matrix::filled(1, 1, 1.0), 1.0).unwrap();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap().data(), &[3.0, 4.0]);
        assert_eq!(tape.grad(b).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn unreached_leaf_grad_is_exactly_zero() {
        let mut tape = Tape::new();
        let used = tape.leaf(Matrix::filled(1, 1, 3.0));
        let unused = tape.leaf(Matrix::filled(2, 2, 5.0));
        let y = tape.matmul(used, used).unwrap();
        tape.backward(y).unwrap();
        let g = tape.grad(unused).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn two_replays_produce_identical_gradients() {
        let build = || {
            let mut tape = Tape::new();
            let x = tape.leaf(Matrix::from_vec(3, 2, vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.9]).unwrap());
            let w = tape.leaf(Matrix::from_vec(2, 2, vec![0.5, -0.25, 1.5, 0.75]).unwrap());
            let h = tape.matmul(x, w).unwrap();
            let r = tape.relu(h);
            let s = tape.softmax_rows(r);
            let m = tape.mean_over_time(s).unwrap();
            let loss = tape.mse_vs(m, &Matrix::filled(1, 2, 0.5)).unwrap();
            tape.backward(loss).unwrap();
            (tape.grad(x).unwrap(), tape.grad(w).unwrap())
        };
        let (gx1, gw1) = build();
        let (gx2, gw2) = build();
        assert!(gx1.bits_eq(&gx2));
        assert!(gw1.bits_eq(&gw2));
    }
}

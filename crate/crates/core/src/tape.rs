//! Define-by-run reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Tape`] records every forward op in insertion order, which is a
//! topological order by construction. [`Tape::backward`] walks the record
//! once in reverse and accumulates gradients per node, so repeated runs
//! produce bit-identical results.

use crate::error::{Error, Result};
use crate::tensor::{matmul_2d, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    ElemMul { a: NodeId, b: NodeId },
    Tanh { x: NodeId },
    Sigmoid { x: NodeId },
    Scale { x: NodeId, c: f64 },
    Concat { a: NodeId, b: NodeId },
    LookupRow { m: NodeId, row: usize },
    LogSoftmax { x: NodeId },
    PickLogProb { x: NodeId, index: usize },
    Sum { x: NodeId },
    Mean { x: NodeId },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradient table produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }
}

#[derive(Default)]
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, value });
        id
    }

    /// Register an input tensor (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = matmul_2d(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a, b }, value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "add",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add { a, b }, value))
    }

    pub fn elemwise_mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::ShapeMismatch {
                op: "elemwise_mul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::ElemMul { a, b }, value))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.tanh()).collect::<Vec<_>>();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::Tanh { x }, value)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect::<Vec<_>>();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::Sigmoid { x }, value)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * c).collect::<Vec<_>>();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::Scale { x, c }, value)
    }

    /// Concatenate two row-compatible matrices along columns.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::ShapeMismatch {
                op: "concat",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let rows = ta.rows();
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            data.extend_from_slice(ta.row_slice(r));
            data.extend_from_slice(tb.row_slice(r));
        }
        let value = Tensor::new(vec![rows, ca + cb], data)?;
        Ok(self.push(Op::Concat { a, b }, value))
    }

    /// Select one row of a matrix as a [1, d] vector.
    pub fn lookup_row(&mut self, m: NodeId, row: usize) -> Result<NodeId> {
        let t = self.value(m);
        if row >= t.rows() {
            return Err(Error::IndexOutOfRange {
                op: "lookup_row",
                index: row,
                bound: t.rows(),
            });
        }
        let value = Tensor::row(t.row_slice(row).to_vec());
        Ok(self.push(Op::LookupRow { m, row }, value))
    }

    /// Row-wise log-softmax, stabilized by subtracting the row max.
    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        let mut data = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = t.row_slice(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
            for (j, v) in row.iter().enumerate() {
                data[r * cols + j] = v - lse;
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(Op::LogSoftmax { x }, value)
    }

    /// Pick one entry of a log-probability row as a scalar node.
    pub fn pick_log_prob(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let t = self.value(x);
        if index >= t.numel() {
            return Err(Error::IndexOutOfRange {
                op: "pick_log_prob",
                index,
                bound: t.numel(),
            });
        }
        let value = Tensor::scalar(t.data()[index]);
        Ok(self.push(Op::PickLogProb { x, index }, value))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(Op::Sum { x }, value)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let value = Tensor::scalar(t.data().iter().sum::<f64>() / t.numel() as f64);
        self.push(Op::Mean { x }, value)
    }

    /// Reverse-mode pass from a scalar node. Returns the gradient of that
    /// scalar with respect to every node on the tape.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_t = self.value(root);
        if !root_t.is_scalar() {
            return Err(Error::NonScalarBackward {
                shape: root_t.shape().to_vec(),
            });
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[root.0].data_mut()[0] = 1.0;

        for i in (0..=root.0).rev() {
            let g = std::mem::replace(&mut grads[i], Tensor::zeros(vec![0]));
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    // dA = G @ Bᵀ ; dB = Aᵀ @ G
                    let mut bt = vec![0.0; n * k];
                    for p in 0..k {
                        for j in 0..n {
                            bt[j * k + p] = tb.data()[p * n + j];
                        }
                    }
                    let da = matmul_2d(g.data(), &bt, m, n, k);
                    let mut at = vec![0.0; k * m];
                    for r in 0..m {
                        for p in 0..k {
                            at[p * m + r] = ta.data()[r * k + p];
                        }
                    }
                    let db = matmul_2d(&at, g.data(), k, m, n);
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[a.0], g.data());
                    accumulate(&mut grads[b.0], g.data());
                }
                Op::ElemMul { a, b } => {
                    let da: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*b).data())
                        .map(|(gv, bv)| gv * bv)
                        .collect();
                    let db: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(gv, av)| gv * av)
                        .collect();
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::Tanh { x } => {
                    let dx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(gv, y)| gv * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::Sigmoid { x } => {
                    let dx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(self.nodes[i].value.data())
                        .map(|(gv, y)| gv * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::Scale { x, c } => {
                    let dx: Vec<f64> = g.data().iter().map(|gv| gv * c).collect();
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::Concat { a, b } => {
                    let (ra, ca) = (self.value(*a).rows(), self.value(*a).cols());
                    let cb = self.value(*b).cols();
                    let total = ca + cb;
                    let mut da = vec![0.0; ra * ca];
                    let mut db = vec![0.0; ra * cb];
                    for r in 0..ra {
                        da[r * ca..(r + 1) * ca]
                            .copy_from_slice(&g.data()[r * total..r * total + ca]);
                        db[r * cb..(r + 1) * cb]
                            .copy_from_slice(&g.data()[r * total + ca..(r + 1) * total]);
                    }
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::LookupRow { m, row } => {
                    let cols = self.value(*m).cols();
                    let target = grads[m.0].data_mut();
                    for (j, gv) in g.data().iter().enumerate() {
                        target[row * cols + j] += gv;
                    }
                }
                Op::LogSoftmax { x } => {
                    // dx = g − softmax(x) · rowsum(g)
                    let y = &self.nodes[i].value;
                    let (rows, cols) = (y.rows(), y.cols());
                    let mut dx = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let gsum: f64 = g.data()[r * cols..(r + 1) * cols].iter().sum();
                        for j in 0..cols {
                            let p = y.data()[r * cols + j].exp();
                            dx[r * cols + j] = g.data()[r * cols + j] - p * gsum;
                        }
                    }
                    accumulate(&mut grads[x.0], &dx);
                }
                Op::PickLogProb { x, index } => {
                    grads[x.0].data_mut()[*index] += g.data()[0];
                }
                Op::Sum { x } => {
                    let gv = g.data()[0];
                    for t in grads[x.0].data_mut() {
                        *t += gv;
                    }
                }
                Op::Mean { x } => {
                    let n = self.value(*x).numel() as f64;
                    let gv = g.data()[0] / n;
                    for t in grads[x.0].data_mut() {
                        *t += gv;
                    }
                }
            }
            grads[i] = g;
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(target: &mut Tensor, src: &[f64]) {
    for (t, s) in target.data_mut().iter_mut().zip(src) {
        *t += s;
    }
}

//! Reverse-mode differentiation over matrix-valued operations.
//!
//! The training loss is built as an append-only tape of matrix nodes. Each
//! node stores its value and the operation that produced it; [`Tape::backward`]
//! walks the tape in reverse and accumulates gradients into every node that
//! (transitively) depends on a gradient-requiring leaf. Constants never
//! allocate gradients, so propagation stops early on the feature side of the
//! network.
//!
//! The op set is exactly what the fixed training graph needs; this is not a
//! general-purpose autodiff engine.

use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{smoothness_backward, smoothness_penalty, spmm, CsrMatrix, SparseAdjacency};
use crate::matrix::{cross_entropy_rows, DenseMatrix, LOG_EPSILON};

/// A trainable weight matrix with its accumulated gradient.
///
/// `grad` always has the same shape as `value`; it is exactly zero after
/// [`Parameter::zero_grad`] and before any backward pass. Gradients from
/// successive backward passes add up until the next `zero_grad`.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: DenseMatrix,
    pub grad: DenseMatrix,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: DenseMatrix) -> Self {
        let grad = DenseMatrix::zeros(value.rows(), value.cols());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Matmul(NodeId, NodeId),
    /// Constant sparse left factor; gradient flows into the dense right
    /// factor through the stored transpose.
    CsrMatmul {
        lhs_t: Arc<CsrMatrix>,
        rhs: NodeId,
    },
    /// Symmetric normalized adjacency times a dense node.
    Spmm {
        adj: Arc<SparseAdjacency>,
        rhs: NodeId,
    },
    Add(NodeId, NodeId),
    Hadamard(NodeId, NodeId),
    MulConst {
        input: NodeId,
        factor: Arc<DenseMatrix>,
    },
    Scale(NodeId, f64),
    Relu(NodeId),
    Exp(NodeId),
    Clamp {
        input: NodeId,
        lo: f64,
        hi: f64,
    },
    SoftmaxRows(NodeId),
    CrossEntropy {
        pred: NodeId,
        target: Arc<DenseMatrix>,
        rows: Arc<Vec<usize>>,
    },
    Smoothness {
        pred: NodeId,
        edges: Arc<Vec<(usize, usize)>>,
    },
    Sum(NodeId),
}

struct Node {
    value: DenseMatrix,
    grad: Option<DenseMatrix>,
    needs_grad: bool,
    op: Op,
}

/// Recorded forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: DenseMatrix, needs_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Records a leaf node.
    pub fn leaf(&mut self, value: DenseMatrix, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf holding a copy of a parameter's current value.
    pub fn param(&mut self, p: &Parameter) -> NodeId {
        self.leaf(p.value.clone(), true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: DenseMatrix) -> NodeId {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Matmul(a, b)))
    }

    pub fn csr_matmul(
        &mut self,
        lhs: &Arc<CsrMatrix>,
        lhs_t: &Arc<CsrMatrix>,
        rhs: NodeId,
    ) -> Result<NodeId> {
        let value = lhs.matmul_dense(&self.nodes[rhs.0].value)?;
        let needs = self.needs(rhs);
        Ok(self.push(
            value,
            needs,
            Op::CsrMatmul {
                lhs_t: Arc::clone(lhs_t),
                rhs,
            },
        ))
    }

    pub fn spmm(&mut self, adj: &Arc<SparseAdjacency>, rhs: NodeId) -> Result<NodeId> {
        let value = spmm(adj, &self.nodes[rhs.0].value)?;
        let needs = self.needs(rhs);
        Ok(self.push(
            value,
            needs,
            Op::Spmm {
                adj: Arc::clone(adj),
                rhs,
            },
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.add(&self.nodes[b.0].value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Add(a, b)))
    }

    pub fn hadamard(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.nodes[a.0].value.hadamard(&self.nodes[b.0].value)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, needs, Op::Hadamard(a, b)))
    }

    /// Elementwise product with a constant matrix (the reparameterization
    /// noise, for instance).
    pub fn mul_const(&mut self, input: NodeId, factor: &Arc<DenseMatrix>) -> Result<NodeId> {
        let value = self.nodes[input.0].value.hadamard(factor)?;
        let needs = self.needs(input);
        Ok(self.push(
            value,
            needs,
            Op::MulConst {
                input,
                factor: Arc::clone(factor),
            },
        ))
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = self.nodes[input.0].value.scale(factor);
        let needs = self.needs(input);
        self.push(value, needs, Op::Scale(input, factor))
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let value = self.nodes[input.0].value.relu();
        let needs = self.needs(input);
        self.push(value, needs, Op::Relu(input))
    }

    pub fn exp(&mut self, input: NodeId) -> NodeId {
        let value = self.nodes[input.0].value.map(libm::exp);
        let needs = self.needs(input);
        self.push(value, needs, Op::Exp(input))
    }

    pub fn clamp(&mut self, input: NodeId, lo: f64, hi: f64) -> NodeId {
        let value = self.nodes[input.0].value.map(|v| v.clamp(lo, hi));
        let needs = self.needs(input);
        self.push(value, needs, Op::Clamp { input, lo, hi })
    }

    pub fn softmax_rows(&mut self, input: NodeId) -> NodeId {
        let value = self.nodes[input.0].value.softmax_rows();
        let needs = self.needs(input);
        self.push(value, needs, Op::SoftmaxRows(input))
    }

    /// Mean cross-entropy of the masked prediction rows against a fixed
    /// target matrix. The target never receives gradient.
    pub fn cross_entropy(
        &mut self,
        pred: NodeId,
        target: &Arc<DenseMatrix>,
        rows: &Arc<Vec<usize>>,
    ) -> Result<NodeId> {
        let ce = cross_entropy_rows(&self.nodes[pred.0].value, target, rows)?;
        let needs = self.needs(pred) && !rows.is_empty();
        Ok(self.push(
            DenseMatrix::filled(1, 1, ce.value),
            needs,
            Op::CrossEntropy {
                pred,
                target: Arc::clone(target),
                rows: Arc::clone(rows),
            },
        ))
    }

    /// Edge-consistency penalty over the prediction rows.
    pub fn smoothness(
        &mut self,
        pred: NodeId,
        edges: &Arc<Vec<(usize, usize)>>,
    ) -> Result<NodeId> {
        let n = self.nodes[pred.0].value.rows();
        for &(a, b) in edges.iter() {
            let worst = a.max(b);
            if worst >= n {
                return Err(Error::IndexOutOfBounds {
                    context: "smoothness edge",
                    index: worst,
                    len: n,
                });
            }
        }
        let value = smoothness_penalty(&self.nodes[pred.0].value, edges);
        let needs = self.needs(pred);
        Ok(self.push(
            DenseMatrix::filled(1, 1, value),
            needs,
            Op::Smoothness {
                pred,
                edges: Arc::clone(edges),
            },
        ))
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let total: f64 = self.nodes[input.0].value.as_slice().iter().sum();
        let needs = self.needs(input);
        self.push(DenseMatrix::filled(1, 1, total), needs, Op::Sum(input))
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix {
        &self.nodes[id.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        let v = &self.nodes[id.0].value;
        if v.shape() != (1, 1) {
            return Err(Error::InvalidConfig(alloc::format!(
                "scalar requested from a {:?} node",
                v.shape()
            )));
        }
        Ok(v.get(0, 0))
    }

    /// Gradient accumulated at a node by the last backward pass.
    pub fn grad(&self, id: NodeId) -> Option<&DenseMatrix> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Propagates gradients from a scalar loss node back to every leaf.
    ///
    /// Gradients accumulate additively when a node feeds several consumers.
    /// Calling this on an empty tape or twice on the same tape is an error.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::NoForwardRecorded);
        }
        if self.backward_done {
            return Err(Error::BackwardAlreadyRun);
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::IndexOutOfBounds {
                context: "backward loss node",
                index: loss.0,
                len: self.nodes.len(),
            });
        }
        if self.nodes[loss.0].value.shape() != (1, 1) {
            return Err(Error::InvalidConfig(alloc::format!(
                "backward needs a 1x1 loss node, got {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(DenseMatrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let contributions = self.op_backward(i)?;
            for (target, contribution) in contributions {
                match &mut self.nodes[target].grad {
                    Some(g) => g.add_assign_scaled(&contribution, 1.0)?,
                    slot @ None => *slot = Some(contribution),
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its inputs. Inputs that do not
    /// require gradient are skipped.
    fn op_backward(&self, i: usize) -> Result<Vec<(usize, DenseMatrix)>> {
        let node = &self.nodes[i];
        let up = node.grad.as_ref().expect("caller checked grad presence");
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                if self.needs(*a) {
                    let bt = self.nodes[b.0].value.transpose();
                    out.push((a.0, up.matmul(&bt)?));
                }
                if self.needs(*b) {
                    let at = self.nodes[a.0].value.transpose();
                    out.push((b.0, at.matmul(up)?));
                }
            }
            Op::CsrMatmul { lhs_t, rhs } => {
                if self.needs(*rhs) {
                    out.push((rhs.0, lhs_t.matmul_dense(up)?));
                }
            }
            Op::Spmm { adj, rhs } => {
                // A_hat is symmetric, so the adjoint is another spmm.
                if self.needs(*rhs) {
                    out.push((rhs.0, spmm(adj, up)?));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((a.0, up.clone()));
                }
                if self.needs(*b) {
                    out.push((b.0, up.clone()));
                }
            }
            Op::Hadamard(a, b) => {
                if self.needs(*a) {
                    out.push((a.0, up.hadamard(&self.nodes[b.0].value)?));
                }
                if self.needs(*b) {
                    out.push((b.0, up.hadamard(&self.nodes[a.0].value)?));
                }
            }
            Op::MulConst { input, factor } => {
                if self.needs(*input) {
                    out.push((input.0, up.hadamard(factor)?));
                }
            }
            Op::Scale(input, factor) => {
                if self.needs(*input) {
                    out.push((input.0, up.scale(*factor)));
                }
            }
            Op::Relu(input) => {
                if self.needs(*input) {
                    let x = &self.nodes[input.0].value;
                    let mut g = up.clone();
                    for (gv, &xv) in g.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    out.push((input.0, g));
                }
            }
            Op::Exp(input) => {
                if self.needs(*input) {
                    out.push((input.0, up.hadamard(&node.value)?));
                }
            }
            Op::Clamp { input, lo, hi } => {
                if self.needs(*input) {
                    let x = &self.nodes[input.0].value;
                    let mut g = up.clone();
                    for (gv, &xv) in g.as_mut_slice().iter_mut().zip(x.as_slice()) {
                        if xv <= *lo || xv >= *hi {
                            *gv = 0.0;
                        }
                    }
                    out.push((input.0, g));
                }
            }
            Op::SoftmaxRows(input) => {
                if self.needs(*input) {
                    let s = &node.value;
                    let mut g = DenseMatrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let sr = s.row(r);
                        let ur = up.row(r);
                        let dot: f64 = sr.iter().zip(ur).map(|(&a, &b)| a * b).sum();
                        let gr = g.row_mut(r);
                        for ((gv, &sv), &uv) in gr.iter_mut().zip(sr).zip(ur) {
                            *gv = sv * (uv - dot);
                        }
                    }
                    out.push((input.0, g));
                }
            }
            Op::CrossEntropy { pred, target, rows } => {
                if self.needs(*pred) && !rows.is_empty() {
                    let scale = self.scalar_grad(up) / rows.len() as f64;
                    let p = &self.nodes[pred.0].value;
                    let mut g = DenseMatrix::zeros(p.rows(), p.cols());
                    for &r in rows.iter() {
                        let pr = p.row(r);
                        let tr = target.row(r);
                        let gr = g.row_mut(r);
                        for ((gv, &pv), &tv) in gr.iter_mut().zip(pr).zip(tr) {
                            if tv != 0.0 {
                                *gv -= scale * tv / (pv + LOG_EPSILON);
                            }
                        }
                    }
                    out.push((pred.0, g));
                }
            }
            Op::Smoothness { pred, edges } => {
                if self.needs(*pred) {
                    let p = &self.nodes[pred.0].value;
                    let mut g = DenseMatrix::zeros(p.rows(), p.cols());
                    smoothness_backward(p, edges, self.scalar_grad(up), &mut g);
                    out.push((pred.0, g));
                }
            }
            Op::Sum(input) => {
                if self.needs(*input) {
                    let shape = self.nodes[input.0].value.shape();
                    out.push((
                        input.0,
                        DenseMatrix::filled(shape.0, shape.1, self.scalar_grad(up)),
                    ));
                }
            }
        }
        Ok(out)
    }

    fn scalar_grad(&self, up: &DenseMatrix) -> f64 {
        debug_assert_eq!(up.shape(), (1, 1));
        up.get(0, 0)
    }
}

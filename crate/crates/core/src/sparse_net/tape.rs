//! Reverse-mode tape over sparse feature buffers. Parameters are referenced by
//! index into an external parameter store.

use std::sync::Arc;

use super::kernel_map::KernelMap;
use super::ops::{self, BnStats};
use super::Scalar;

pub type NodeId = usize;

#[derive(Debug, Clone)]
enum Op<S> {
    Leaf,
    Conv { x: NodeId, w: usize, b: usize, map: Arc<KernelMap> },
    Norm { x: NodeId, gamma: usize, beta: usize, xhat: Vec<S>, inv_std: Vec<S>, batch: bool },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Concat { a: NodeId, b: NodeId },
}

#[derive(Debug, Clone)]
struct Node<S> {
    cols: usize,
    value: Vec<S>,
    op: Op<S>,
}

#[derive(Debug, Clone, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

/// Gradients of every parameter and of every node reached by the backward sweep.
#[derive(Debug, Clone)]
pub struct TapeGrads<S> {
    pub params: Vec<Vec<S>>,
    /// Set for leaf nodes only.
    pub nodes: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, cols: usize, value: Vec<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { cols, value, op });
        self.nodes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[S] {
        &self.nodes[id].value
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.nodes[id].cols
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id].value.len() / self.nodes[id].cols.max(1)
    }

    pub fn leaf(&mut self, cols: usize, value: Vec<S>) -> NodeId {
        self.push(cols, value, Op::Leaf)
    }

    pub fn conv(&mut self, params: &[Vec<S>], x: NodeId, w: usize, b: usize, map: Arc<KernelMap>) -> NodeId {
        let cin = self.cols(x);
        let cout = params[b].len();
        debug_assert_eq!(params[w].len(), map.kvol * cin * cout);
        let y = ops::conv_forward(&self.nodes[x].value, cin, &map, &params[w], &params[b], cout);
        self.push(cout, y, Op::Conv { x, w, b, map })
    }

    /// Normalization with batch statistics; returns the statistics to commit.
    pub fn norm_batch(&mut self, params: &[Vec<S>], x: NodeId, gamma: usize, beta: usize) -> (NodeId, BnStats<S>) {
        let c = self.cols(x);
        let out = ops::bn_forward_train(&self.nodes[x].value, c, &params[gamma], &params[beta]);
        let id = self.push(c, out.y, Op::Norm { x, gamma, beta, xhat: out.xhat, inv_std: out.inv_std, batch: true });
        (id, out.stats)
    }

    /// Normalization with fixed (running) statistics.
    pub fn norm_fixed(
        &mut self,
        params: &[Vec<S>],
        x: NodeId,
        gamma: usize,
        beta: usize,
        mean: &[S],
        var: &[S],
    ) -> NodeId {
        let c = self.cols(x);
        let (y, xhat, inv_std) =
            ops::bn_forward_eval(&self.nodes[x].value, c, &params[gamma], &params[beta], mean, var);
        self.push(c, y, Op::Norm { x, gamma, beta, xhat, inv_std, batch: false })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x].value.iter().map(|&v| if v > S::zero() { v } else { S::zero() }).collect();
        self.push(self.cols(x), y, Op::Relu { x })
    }

    /// Sign of every ReLU input, in tape order. Two evaluations with the same
    /// pattern lie on the same smooth piece of the recorded function.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu { x } => Some(&self.nodes[x].value),
                _ => None,
            })
            .flat_map(|v| v.iter().map(|&u| u > S::zero()))
            .collect()
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.nodes[a].value.len(), self.nodes[b].value.len(), "add shape mismatch");
        let y = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(&u, &v)| u + v).collect();
        self.push(self.cols(a), y, Op::Add { a, b })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (ca, cb) = (self.cols(a), self.cols(b));
        assert_eq!(self.rows(a), self.rows(b), "concat row mismatch");
        let mut y = Vec::with_capacity(self.nodes[a].value.len() + self.nodes[b].value.len());
        for (ra, rb) in self.nodes[a].value.chunks_exact(ca).zip(self.nodes[b].value.chunks_exact(cb)) {
            y.extend_from_slice(ra);
            y.extend_from_slice(rb);
        }
        self.push(ca + cb, y, Op::Concat { a, b })
    }

    /// Propagates `seeds` (gradients at chosen nodes) back through the tape.
    pub fn backward(&self, params: &[Vec<S>], seeds: &[(NodeId, &[S])]) -> TapeGrads<S> {
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        let mut pgrads: Vec<Vec<S>> = params.iter().map(|p| vec![S::zero(); p.len()]).collect();
        for &(id, g) in seeds {
            accumulate(&mut grads[id], g, self.nodes[id].value.len());
        }
        for id in (0..self.nodes.len()).rev() {
            let Some(dy) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Conv { x, w, b, map } => {
                    let cin = self.cols(*x);
                    let mut dx = vec![S::zero(); self.nodes[*x].value.len()];
                    let (dw, db) = two_mut(&mut pgrads, *w, *b);
                    ops::conv_backward(
                        &self.nodes[*x].value,
                        cin,
                        map,
                        &params[*w],
                        node.cols,
                        &dy,
                        Some(&mut dx),
                        dw,
                        db,
                    );
                    accumulate(&mut grads[*x], &dx, dx.len());
                }
                Op::Norm { x, gamma, beta, xhat, inv_std, batch } => {
                    let mut dx = vec![S::zero(); dy.len()];
                    let (dg, dbeta) = two_mut(&mut pgrads, *gamma, *beta);
                    ops::bn_backward(&dy, xhat, inv_std, &params[*gamma], node.cols, *batch, &mut dx, dg, dbeta);
                    accumulate(&mut grads[*x], &dx, dx.len());
                }
                Op::Relu { x } => {
                    let dx: Vec<S> =
                        dy.iter().zip(&node.value).map(|(&g, &v)| if v > S::zero() { g } else { S::zero() }).collect();
                    accumulate(&mut grads[*x], &dx, dx.len());
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads[*a], &dy, dy.len());
                    accumulate(&mut grads[*b], &dy, dy.len());
                }
                Op::Concat { a, b } => {
                    let (ca, cb) = (self.cols(*a), self.cols(*b));
                    let mut da = Vec::with_capacity(self.nodes[*a].value.len());
                    let mut db = Vec::with_capacity(self.nodes[*b].value.len());
                    for row in dy.chunks_exact(ca + cb) {
                        da.extend_from_slice(&row[..ca]);
                        db.extend_from_slice(&row[ca..]);
                    }
                    accumulate(&mut grads[*a], &da, da.len());
                    accumulate(&mut grads[*b], &db, db.len());
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(dy);
            }
        }
        TapeGrads { params: pgrads, nodes: grads }
    }
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, g: &[S], len: usize) {
    assert_eq!(g.len(), len, "gradient shape mismatch");
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, v)| *a += *v),
        None => *slot = Some(g.to_vec()),
    }
}

fn two_mut<T>(v: &mut [T], i: usize, j: usize) -> (&mut T, &mut T) {
    assert_ne!(i, j);
    if i < j {
        let (a, b) = v.split_at_mut(j);
        (&mut a[i], &mut b[0])
    } else {
        let (a, b) = v.split_at_mut(i);
        (&mut b[0], &mut a[j])
    }
}

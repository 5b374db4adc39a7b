use std::collections::HashMap;

use super::conv::ResizePlan;
use super::elementwise::{BinaryKind, UnaryKind};
use super::{numel, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node {
    pub(crate) shape: Vec<usize>,
    pub(crate) value: Vec<f64>,
    pub(crate) requires_grad: bool,
    /// Accumulated gradient, only kept for leaves.
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) op: Op,
}

/// Recorded operation together with whatever its gradient rule needs.
pub(crate) enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Offset {
        x: Var,
    },
    Unary {
        kind: UnaryKind,
        x: Var,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Softmax {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Reshape {
        x: Var,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    SumAll {
        x: Var,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    MaxPool2d {
        x: Var,
        argmax: Vec<usize>,
    },
    Resize {
        x: Var,
        plan: ResizePlan,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Binary { a, b, .. } | Op::MatMul { a, b } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::Offset { x }
            | Op::Unary { x, .. }
            | Op::Clamp { x, .. }
            | Op::Softmax { x }
            | Op::Reshape { x }
            | Op::Permute { x, .. }
            | Op::SumAll { x }
            | Op::MeanAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::MaxPool2d { x, .. }
            | Op::Resize { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
        }
    }
}

/// Collects gradient contributions during a backward sweep.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Mutable gradient buffer for `v`, zero-initialized on first touch.
    pub(crate) fn buffer(&mut self, v: Var) -> &mut [f64] {
        let len = self.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub(crate) fn add(&mut self, v: Var, delta: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
            slot @ None => *slot = Some(delta),
        }
    }
}

/// Define-by-run tape. Operations are appended in execution order, so node
/// ids are already a topological order.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    pub(crate) param_vars: HashMap<usize, Var>,
    pub(crate) buffer_updates: Vec<(usize, Vec<f64>)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `t` as a leaf. Gradients are tracked iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.shape().to_vec(), t.data().to_vec(), false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(vec![], vec![value], false)
    }

    pub(crate) fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn item(&self, v: Var) -> f64 {
        let val = self.value(v);
        assert_eq!(
            val.len(),
            1,
            "item() on a non-scalar of shape {:?}",
            self.shape(v)
        );
        val[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_vec(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// Reverse-mode sweep from a scalar `loss`. Leaf gradients accumulate
    /// across calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::dim(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaf_grads.push((id, g));
                continue;
            }
            let mut sink = GradSink {
                nodes: &self.nodes,
                grads: &mut grads,
            };
            self.propagate(id, &g, &mut sink);
        }
        for (id, g) in leaf_grads {
            let node = &mut self.nodes[id];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], sink: &mut GradSink) {
        let out = &self.nodes[id];
        match &out.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Binary { kind, a, b } => self.binary_backward(*kind, *a, *b, &out.shape, g, sink),
            Op::Scale { x, factor } => sink.add(*x, g.iter().map(|v| v * factor).collect()),
            Op::Offset { x } | Op::Reshape { x } => sink.add(*x, g.to_vec()),
            Op::Unary { kind, x } => self.unary_backward(*kind, *x, &out.value, g, sink),
            Op::Clamp { x, lo, hi } => self.clamp_backward(*x, *lo, *hi, g, sink),
            Op::Softmax { x } => self.softmax_backward(*x, &out.value, &out.shape, g, sink),
            Op::MatMul { a, b } => self.matmul_backward(*a, *b, &out.shape, g, sink),
            Op::Permute { x, perm } => self.permute_backward(*x, perm, &out.shape, g, sink),
            Op::Concat { xs, axis } => self.concat_backward(xs, *axis, g, sink),
            Op::SumAll { x } => {
                let n = self.nodes[x.0].value.len();
                sink.add(*x, vec![g[0]; n]);
            }
            Op::MeanAxis { x, axis } => self.mean_axis_backward(*x, *axis, g, sink),
            Op::MaxAxis { x, argmax, .. } | Op::MaxPool2d { x, argmax } => {
                if sink.wants(*x) {
                    let buf = sink.buffer(*x);
                    for (o, &src) in argmax.iter().enumerate() {
                        buf[src] += g[o];
                    }
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.conv2d_backward(*x, *w, *b, *stride, *pad, &out.shape, g, sink),
            Op::Resize { x, plan } => self.resize_backward(*x, plan, g, sink),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => self.batch_norm_backward(*x, *gamma, *beta, xhat, inv_std, *batch_stats, g, sink),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => self.layer_norm_backward(*x, *gamma, *beta, xhat, inv_std, g, sink),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_exactly_one() {
        let mut g = Graph::new();
        let x = g.input(
            &Tensor::from_vec(&[2, 3], vec![0.3, -1.0, 2.0, 5.0, 7.0, -0.5])
                .unwrap()
                .with_requires_grad(true),
        );
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(g.grad(x).unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.input(
            &Tensor::from_vec(&[3], vec![1.0, 2.0, 3.0])
                .unwrap()
                .with_requires_grad(true),
        );
        let y = g.mul(x, x).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.backward(s).unwrap();
        let second = g.grad(x).unwrap();
        for (a, b) in first.iter().zip(second) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn reset_then_backward_is_bitwise_repeatable() {
        let mut g = Graph::new();
        let x = g.input(
            &Tensor::from_vec(&[4], vec![0.1, -0.7, 1.3, 2.2])
                .unwrap()
                .with_requires_grad(true),
        );
        let y = g.gelu(x);
        let z = g.softmax_last_dim(y).unwrap();
        let w = g.mul(z, y).unwrap();
        let s = g.sum(w);
        g.backward(s).unwrap();
        let first = g.grad(x).unwrap().to_vec();
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(first, g.grad(x).unwrap());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::ones(&[2]).with_requires_grad(true));
        assert!(matches!(g.backward(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::ones(&[2]).with_requires_grad(true));
        let c = g.constant(&Tensor::full(&[2], 3.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[3.0, 3.0]);
        assert!(g.grad(c).is_none());
    }
}

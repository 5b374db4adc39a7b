//! Broadcasting binary ops, pointwise activations and softmax.

use super::graph::{GradSink, Op};
use super::{numel, strides, Graph, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Relu,
    Gelu,
    Sigmoid,
    Ln,
    Exp,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh approximation of GELU: 0.5·x·(1 + tanh(sqrt(2/π)·(x + 0.044715·x³))).
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Right-aligned (numpy-style) broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::dim(format!(
                    "shapes {:?} and {:?} are not broadcastable",
                    a, b
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out`, with 0 on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every output index together with the matching offsets into two
/// broadcast inputs.
pub(crate) fn walk2(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = rank - 1;
    let inner = out[last];
    let (ia_step, ib_step) = (sa[last], sb[last]);
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        let (mut a, mut b) = (ia, ib);
        for k in 0..inner {
            f(o + k, a, b);
            a += ia_step;
            b += ib_step;
        }
        o += inner;
        // advance the odometer over the outer axes
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

impl Graph {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (va, vb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (shape, value) = if sa == sb {
            (sa, va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect())
        } else {
            let out = broadcast_shape(&sa, &sb)?;
            let mut value = vec![0.0; numel(&out)];
            walk2(
                &out,
                &broadcast_strides(&sa, &out),
                &broadcast_strides(&sb, &out),
                |o, i, j| value[o] = f(va[i], vb[j]),
            );
            (out, value)
        };
        Ok(self.push(shape, value, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Broadcasting elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Hadamard product of two identically shaped tensors.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "hadamard needs identical shapes, got {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).iter().map(|v| v * factor).collect();
        self.push(self.shape(x).to_vec(), value, Op::Scale { x, factor })
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).iter().map(|v| v + c).collect();
        self.push(self.shape(x).to_vec(), value, Op::Offset { x })
    }

    /// `1 - x`, a common pattern in the losses.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, 1.0)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Var {
        let f = match kind {
            UnaryKind::Relu => |v: f64| v.max(0.0),
            UnaryKind::Gelu => gelu_scalar,
            UnaryKind::Sigmoid => sigmoid_scalar,
            UnaryKind::Ln => f64::ln,
            UnaryKind::Exp => f64::exp,
        };
        let value = self.value(x).iter().map(|&v| f(v)).collect();
        self.push(self.shape(x).to_vec(), value, Op::Unary { kind, x })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(UnaryKind::Exp, x)
    }

    /// Natural log; every input must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if let Some(bad) = self.value(x).iter().find(|v| !(**v > 0.0)) {
            return Err(Error::Numeric(format!("ln of non-positive value {bad}")));
        }
        Ok(self.unary(UnaryKind::Ln, x))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        self.push(self.shape(x).to_vec(), value, Op::Clamp { x, lo, hi })
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_last_dim(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::dim("softmax needs at least one axis"))?;
        let input = self.value(x);
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax input is not finite".into()));
        }
        let mut value = vec![0.0; input.len()];
        for (src, dst) in input.chunks_exact(d).zip(value.chunks_exact_mut(d)) {
            let max = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - max).exp();
                total += *o;
            }
            dst.iter_mut().for_each(|o| *o /= total);
        }
        Ok(self.push(shape, value, Op::Softmax { x }))
    }

    pub(crate) fn binary_backward(
        &self,
        kind: BinaryKind,
        a: Var,
        b: Var,
        out: &[usize],
        g: &[f64],
        sink: &mut GradSink,
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (self.shape(a), self.shape(b));
        let same = sa == out && sb == out;
        let (stride_a, stride_b) = if same {
            (Vec::new(), Vec::new())
        } else {
            (broadcast_strides(sa, out), broadcast_strides(sb, out))
        };
        let visit = |f: &mut dyn FnMut(usize, usize, usize)| {
            if same {
                (0..g.len()).for_each(|o| f(o, o, o));
            } else {
                walk2(out, &stride_a, &stride_b, f);
            }
        };
        if sink.wants(a) {
            let mut ga = vec![0.0; va.len()];
            visit(&mut |o, i, j| {
                ga[i] += match kind {
                    BinaryKind::Add | BinaryKind::Sub => g[o],
                    BinaryKind::Mul => g[o] * vb[j],
                    BinaryKind::Div => g[o] / vb[j],
                }
            });
            sink.add(a, ga);
        }
        if sink.wants(b) {
            let mut gb = vec![0.0; vb.len()];
            visit(&mut |o, i, j| {
                gb[j] += match kind {
                    BinaryKind::Add => g[o],
                    BinaryKind::Sub => -g[o],
                    BinaryKind::Mul => g[o] * va[i],
                    BinaryKind::Div => -g[o] * va[i] / (vb[j] * vb[j]),
                }
            });
            sink.add(b, gb);
        }
    }

    pub(crate) fn unary_backward(
        &self,
        kind: UnaryKind,
        x: Var,
        y: &[f64],
        g: &[f64],
        sink: &mut GradSink,
    ) {
        if !sink.wants(x) {
            return;
        }
        let xv = self.value(x);
        let grad = (0..g.len())
            .map(|i| {
                g[i] * match kind {
                    UnaryKind::Relu => {
                        if xv[i] > 0.0 {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    UnaryKind::Gelu => gelu_grad_scalar(xv[i]),
                    UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                    UnaryKind::Ln => 1.0 / xv[i],
                    UnaryKind::Exp => y[i],
                }
            })
            .collect();
        sink.add(x, grad);
    }

    pub(crate) fn clamp_backward(&self, x: Var, lo: f64, hi: f64, g: &[f64], sink: &mut GradSink) {
        if !sink.wants(x) {
            return;
        }
        let xv = self.value(x);
        let grad = g
            .iter()
            .zip(xv)
            .map(|(&g, &v)| if v >= lo && v <= hi { g } else { 0.0 })
            .collect();
        sink.add(x, grad);
    }

    pub(crate) fn softmax_backward(
        &self,
        x: Var,
        y: &[f64],
        shape: &[usize],
        g: &[f64],
        sink: &mut GradSink,
    ) {
        if !sink.wants(x) {
            return;
        }
        let d = *shape.last().unwrap();
        let mut grad = vec![0.0; y.len()];
        for ((yr, gr), out) in y
            .chunks_exact(d)
            .zip(g.chunks_exact(d))
            .zip(grad.chunks_exact_mut(d))
        {
            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
            for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                *o = yv * (gv - dot);
            }
        }
        sink.add(x, grad);
    }
}

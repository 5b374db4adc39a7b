use super::elementwise::walk2;
use super::graph::{GradSink, Op};
use super::{check_shape, numel, strides, Graph, Var};
use crate::error::{Error, Result};

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        if numel(shape) != self.value(x).len() {
            return Err(Error::dim(format!(
                "cannot reshape {:?} into {:?}",
                self.shape(x),
                shape
            )));
        }
        let value = self.value(x).to_vec();
        Ok(self.push(shape.to_vec(), value, Op::Reshape { x }))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim(format!(
                "{:?} is not a permutation of the axes of {:?}",
                perm, shape
            )));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let walk_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let src = self.value(x);
        let mut value = vec![0.0; src.len()];
        walk2(&out_shape, &walk_strides, &walk_strides, |o, i, _| {
            value[o] = src[i]
        });
        Ok(self.push(
            out_shape,
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *xs.first()
                    .ok_or_else(|| Error::dim("concat of an empty list"))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::dim(format!(
                "concat axis {axis} out of range for {:?}",
                first
            )));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim(format!(
                    "cannot concatenate {:?} with {:?} along axis {axis}",
                    first, s
                )));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut value = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in xs {
                let chunk = self.shape(v)[axis] * inner;
                value.extend_from_slice(&self.value(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        ))
    }

    /// Channel concatenation of `[B, Ci, H, W]` maps.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        for &v in xs {
            if self.shape(v).len() != 4 {
                return Err(Error::dim(format!(
                    "concat_channels expects [B,C,H,W], got {:?}",
                    self.shape(v)
                )));
            }
        }
        self.concat(xs, 1)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        self.push(vec![], vec![s], Op::SumAll { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over one axis, keeping it with size 1.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "axis {axis} out of range for {:?}",
                shape
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &src[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in value[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc += v;
                }
            }
        }
        value.iter_mut().for_each(|v| *v /= len as f64);
        let mut out = shape;
        out[axis] = 1;
        Ok(self.push(out, value, Op::MeanAxis { x, axis }))
    }

    /// Max over one axis, keeping it with size 1.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim(format!(
                "axis {axis} out of range for {:?}",
                shape
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x);
        let mut value = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    let at = (o * len + j) * inner + i;
                    if src[at] > value[o * inner + i] {
                        value[o * inner + i] = src[at];
                        argmax[o * inner + i] = at;
                    }
                }
            }
        }
        let mut out = shape;
        out[axis] = 1;
        Ok(self.push(out, value, Op::MaxAxis { x, argmax }))
    }

    /// `[B, C, H, W] -> [B, C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::dim(format!(
                "global_avg_pool expects [B,C,H,W], got {:?}",
                s
            )));
        }
        let flat = self.reshape(x, &[s[0], s[1], s[2] * s[3]])?;
        let m = self.mean_axis(flat, 2)?;
        self.reshape(m, &[s[0], s[1]])
    }

    pub(crate) fn permute_backward(
        &self,
        x: Var,
        perm: &[usize],
        out: &[usize],
        g: &[f64],
        sink: &mut GradSink,
    ) {
        if !sink.wants(x) {
            return;
        }
        let in_strides = strides(self.shape(x));
        let walk_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut grad = vec![0.0; g.len()];
        walk2(out, &walk_strides, &walk_strides, |o, i, _| grad[i] = g[o]);
        sink.add(x, grad);
    }

    pub(crate) fn concat_backward(&self, xs: &[Var], axis: usize, g: &[f64], sink: &mut GradSink) {
        let first = self.shape(xs[0]);
        let outer = numel(&first[..axis]);
        let inner = numel(&first[axis + 1..]);
        let row: usize = xs.iter().map(|&v| self.shape(v)[axis] * inner).sum();
        let mut offset = 0;
        for &v in xs {
            let chunk = self.shape(v)[axis] * inner;
            if sink.wants(v) {
                let mut grad = Vec::with_capacity(outer * chunk);
                for o in 0..outer {
                    let start = o * row + offset;
                    grad.extend_from_slice(&g[start..start + chunk]);
                }
                sink.add(v, grad);
            }
            offset += chunk;
        }
    }

    pub(crate) fn mean_axis_backward(&self, x: Var, axis: usize, g: &[f64], sink: &mut GradSink) {
        if !sink.wants(x) {
            return;
        }
        let (outer, len, inner) = split_axis(self.shape(x), axis);
        let mut grad = vec![0.0; outer * len * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    grad[(o * len + j) * inner + i] = g[o * inner + i] / len as f64;
                }
            }
        }
        sink.add(x, grad);
    }
}

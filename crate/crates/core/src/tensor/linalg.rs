use super::elementwise::{broadcast_shape, broadcast_strides, walk2};
use super::gemm::gemm;
use super::graph::{GradSink, Op};
use super::{numel, Graph, Var};
use crate::error::{Error, Result};

struct MatmulDims {
    batch: Vec<usize>,
    stride_a: Vec<usize>,
    stride_b: Vec<usize>,
    n: usize,
    k: usize,
    m: usize,
}

fn matmul_dims(sa: &[usize], sb: &[usize]) -> Result<MatmulDims> {
    if sa.len() < 2 || sb.len() < 2 {
        return Err(Error::dim(format!(
            "matmul needs rank >= 2 operands, got {:?} and {:?}",
            sa, sb
        )));
    }
    let (n, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
    let (k2, m) = (sb[sb.len() - 2], sb[sb.len() - 1]);
    if k != k2 {
        return Err(Error::dim(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            sa, sb
        )));
    }
    let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
    let batch = broadcast_shape(ba, bb).map_err(|_| {
        Error::dim(format!(
            "matmul batch dimensions of {:?} and {:?} do not broadcast",
            sa, sb
        ))
    })?;
    Ok(MatmulDims {
        stride_a: broadcast_strides(ba, &batch),
        stride_b: broadcast_strides(bb, &batch),
        batch,
        n,
        k,
        m,
    })
}

impl Graph {
    /// Batched matrix product `[.., n, k] x [.., k, m] -> [.., n, m]` with
    /// broadcasting over the leading dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = matmul_dims(self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k, m) = (d.n, d.k, d.m);
        let mut out = vec![0.0; numel(&d.batch) * n * m];
        walk2(&d.batch, &d.stride_a, &d.stride_b, |o, ia, ib| {
            gemm(
                n,
                k,
                m,
                &va[ia * n * k..(ia + 1) * n * k],
                false,
                &vb[ib * k * m..(ib + 1) * k * m],
                false,
                0.0,
                &mut out[o * n * m..(o + 1) * n * m],
            );
        });
        let mut shape = d.batch.clone();
        shape.extend([n, m]);
        Ok(self.push(shape, out, Op::MatMul { a, b }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(Error::dim("transpose needs rank >= 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub(crate) fn matmul_backward(
        &self,
        a: Var,
        b: Var,
        _out: &[usize],
        g: &[f64],
        sink: &mut GradSink,
    ) {
        let d = matmul_dims(self.shape(a), self.shape(b)).expect("validated in forward");
        let (va, vb) = (self.value(a), self.value(b));
        let (n, k, m) = (d.n, d.k, d.m);
        if sink.wants(a) {
            let mut ga = vec![0.0; va.len()];
            walk2(&d.batch, &d.stride_a, &d.stride_b, |o, ia, ib| {
                gemm(
                    n,
                    m,
                    k,
                    &g[o * n * m..(o + 1) * n * m],
                    false,
                    &vb[ib * k * m..(ib + 1) * k * m],
                    true,
                    1.0,
                    &mut ga[ia * n * k..(ia + 1) * n * k],
                );
            });
            sink.add(a, ga);
        }
        if sink.wants(b) {
            let mut gb = vec![0.0; vb.len()];
            walk2(&d.batch, &d.stride_a, &d.stride_b, |o, ia, ib| {
                gemm(
                    k,
                    n,
                    m,
                    &va[ia * n * k..(ia + 1) * n * k],
                    true,
                    &g[o * n * m..(o + 1) * n * m],
                    false,
                    1.0,
                    &mut gb[ib * k * m..(ib + 1) * k * m],
                );
            });
            sink.add(b, gb);
        }
    }
}

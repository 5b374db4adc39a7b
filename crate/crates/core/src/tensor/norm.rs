use super::graph::{GradSink, Op};
use super::{Graph, Var};
use crate::error::{Error, Result};

/// Updated running statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Graph {
    /// Layer norm over the last axis with affine `gamma`/`beta` of shape `[D]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape
            .last()
            .ok_or_else(|| Error::dim("layer_norm needs at least one axis"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim(format!(
                "layer_norm affine params {:?}/{:?} do not match last axis {d}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let src = self.value(x);
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Batch norm over `[B, C, H, W]`. In training mode the batch statistics
    /// normalize the input and the blended running statistics are returned;
    /// in eval mode the given running statistics are used as-is.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        training: bool,
        momentum: f64,
        eps: f64,
    ) -> Result<(Var, Option<RunningStats>)> {
        let shape = self.shape(x).to_vec();
        let &[b, c, h, w] = shape.as_slice() else {
            return Err(Error::dim(format!(
                "batch_norm2d expects [B,C,H,W], got {:?}",
                shape
            )));
        };
        for (what, len) in [
            ("gamma", self.shape(gamma).to_vec()),
            ("beta", self.shape(beta).to_vec()),
            ("running mean", vec![running_mean.len()]),
            ("running var", vec![running_var.len()]),
        ] {
            if len != [c] {
                return Err(Error::dim(format!(
                    "batch_norm2d {what} {:?} does not match {c} channels",
                    len
                )));
            }
        }
        let count = b * h * w;
        if training && count < 2 {
            return Err(Error::DegenerateBatch(count));
        }
        let hw = h * w;
        let src = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if training {
            for n in 0..b {
                for ch in 0..c {
                    mean[ch] += src[(n * c + ch) * hw..(n * c + ch + 1) * hw]
                        .iter()
                        .sum::<f64>();
                }
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for n in 0..b {
                for ch in 0..c {
                    var[ch] += src[(n * c + ch) * hw..(n * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v - mean[ch]) * (v - mean[ch]))
                        .sum::<f64>();
                }
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
        } else {
            mean.copy_from_slice(running_mean);
            var.copy_from_slice(running_var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    let v = (src[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = v;
                    out[i] = v * gv[ch] + bv[ch];
                }
            }
        }
        let stats = training.then(|| {
            let unbiased = count as f64 / (count as f64 - 1.0);
            RunningStats {
                mean: running_mean
                    .iter()
                    .zip(&mean)
                    .map(|(r, m)| (1.0 - momentum) * r + momentum * m)
                    .collect(),
                var: running_var
                    .iter()
                    .zip(&var)
                    .map(|(r, v)| (1.0 - momentum) * r + momentum * v * unbiased)
                    .collect(),
            }
        });
        let var_out = self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats: training,
            },
        );
        Ok((var_out, stats))
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn layer_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[f64],
        inv_std: &[f64],
        g: &[f64],
        sink: &mut GradSink,
    ) {
        let gv = self.value(gamma);
        let d = gv.len();
        if sink.wants(gamma) {
            let mut gg = vec![0.0; d];
            for (i, (&go, &h)) in g.iter().zip(xhat).enumerate() {
                gg[i % d] += go * h;
            }
            sink.add(gamma, gg);
        }
        if sink.wants(beta) {
            let mut gb = vec![0.0; d];
            for (i, &go) in g.iter().enumerate() {
                gb[i % d] += go;
            }
            sink.add(beta, gb);
        }
        if sink.wants(x) {
            let mut gx = vec![0.0; g.len()];
            for (r, &is) in inv_std.iter().enumerate() {
                let span = r * d..(r + 1) * d;
                let dh: Vec<f64> = g[span.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                let sum_dh: f64 = dh.iter().sum();
                let sum_dh_h: f64 = dh.iter().zip(&xhat[span.clone()]).map(|(a, b)| a * b).sum();
                for j in 0..d {
                    let h = xhat[r * d + j];
                    gx[r * d + j] = is / d as f64 * (d as f64 * dh[j] - sum_dh - h * sum_dh_h);
                }
            }
            sink.add(x, gx);
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn batch_norm_backward(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
        g: &[f64],
        sink: &mut GradSink,
    ) {
        let &[b, c, h, w] = self.shape(x) else {
            unreachable!()
        };
        let hw = h * w;
        let count = (b * hw) as f64;
        let gv = self.value(gamma);
        let mut sum_g = vec![0.0; c];
        let mut sum_gh = vec![0.0; c];
        for n in 0..b {
            for ch in 0..c {
                let base = (n * c + ch) * hw;
                for i in base..base + hw {
                    sum_g[ch] += g[i];
                    sum_gh[ch] += g[i] * xhat[i];
                }
            }
        }
        if sink.wants(x) {
            let mut gx = vec![0.0; g.len()];
            for n in 0..b {
                for ch in 0..c {
                    let base = (n * c + ch) * hw;
                    let k = gv[ch] * inv_std[ch];
                    for i in base..base + hw {
                        gx[i] = if batch_stats {
                            k / count * (count * g[i] - sum_g[ch] - xhat[i] * sum_gh[ch])
                        } else {
                            k * g[i]
                        };
                    }
                }
            }
            sink.add(x, gx);
        }
        sink.add(gamma, sum_gh);
        sink.add(beta, sum_g);
    }
}

//! Spatial ops on `[B, C, H, W]` tensors: convolution (im2col + gemm),
//! max pooling and bilinear resampling.

use super::gemm::gemm;
use super::graph::{GradSink, Op};
use super::{Graph, Var};
use crate::error::{Error, Result};

/// Output length of a strided, padded window sweep.
pub fn conv_output_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(Error::dim(format!(
            "{what} expects a [B,C,H,W] tensor, got {:?}",
            shape
        ))),
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(x: &[f64], gm: &ConvGeom, cols: &mut [f64]) {
    let p = gm.col_cols();
    for c in 0..gm.cin {
        let plane = &x[c * gm.h * gm.w..(c + 1) * gm.h * gm.w];
        for ki in 0..gm.kh {
            for kj in 0..gm.kw {
                let row = (c * gm.kh + ki) * gm.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..gm.ho {
                    let iy = (oy * gm.stride + ki) as isize - gm.pad as isize;
                    let line = &mut dst[oy * gm.wo..(oy + 1) * gm.wo];
                    if iy < 0 || iy >= gm.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * gm.w..(iy as usize + 1) * gm.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * gm.stride + kj) as isize - gm.pad as isize;
                        *v = if ix < 0 || ix >= gm.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], gm: &ConvGeom, x: &mut [f64]) {
    let p = gm.col_cols();
    for c in 0..gm.cin {
        let plane = &mut x[c * gm.h * gm.w..(c + 1) * gm.h * gm.w];
        for ki in 0..gm.kh {
            for kj in 0..gm.kw {
                let row = (c * gm.kh + ki) * gm.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..gm.ho {
                    let iy = (oy * gm.stride + ki) as isize - gm.pad as isize;
                    if iy < 0 || iy >= gm.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * gm.w..(iy as usize + 1) * gm.w];
                    for ox in 0..gm.wo {
                        let ix = (ox * gm.stride + kj) as isize - gm.pad as isize;
                        if ix >= 0 && ix < gm.w as isize {
                            line[ix as usize] += src[oy * gm.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Per-axis interpolation taps for an align-corners=false bilinear resize.
#[derive(Clone, Debug)]
pub(crate) struct ResizePlan {
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    ys: Vec<(usize, usize, f64)>,
    xs: Vec<(usize, usize, f64)>,
}

fn taps(input: usize, output: usize) -> Vec<(usize, usize, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = if i0 + 1 < input { i0 + 1 } else { i0 };
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

impl ResizePlan {
    fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self {
            in_h,
            in_w,
            out_h,
            out_w,
            ys: taps(in_h, out_h),
            xs: taps(in_w, out_w),
        }
    }

    // `a + t·(b − a)` keeps constant planes exactly constant.
    fn apply(&self, src: &[f64], dst: &mut [f64]) {
        for (oy, &(y0, y1, ly)) in self.ys.iter().enumerate() {
            let r0 = &src[y0 * self.in_w..(y0 + 1) * self.in_w];
            let r1 = &src[y1 * self.in_w..(y1 + 1) * self.in_w];
            for (ox, &(x0, x1, lx)) in self.xs.iter().enumerate() {
                let top = r0[x0] + lx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + lx * (r1[x1] - r1[x0]);
                dst[oy * self.out_w + ox] = top + ly * (bot - top);
            }
        }
    }

    fn apply_transpose(&self, g: &[f64], dst: &mut [f64]) {
        for (oy, &(y0, y1, ly)) in self.ys.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in self.xs.iter().enumerate() {
                let v = g[oy * self.out_w + ox];
                dst[y0 * self.in_w + x0] += v * (1.0 - lx) * (1.0 - ly);
                dst[y0 * self.in_w + x1] += v * lx * (1.0 - ly);
                dst[y1 * self.in_w + x0] += v * (1.0 - lx) * ly;
                dst[y1 * self.in_w + x1] += v * lx * ly;
            }
        }
    }
}

/// Bilinear (align-corners=false) resize of a single row-major plane.
pub fn bilinear_resize_plane(
    src: &[f64],
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), in_h * in_w);
    let plan = ResizePlan::new(in_h, in_w, out_h, out_w);
    let mut dst = vec![0.0; out_h * out_w];
    plan.apply(src, &mut dst);
    dst
}

impl Graph {
    /// 2-D cross-correlation. `w` is `[Cout, Cin, kh, kw]`, `b` is `[Cout]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let [batch, cin, h, wd] = dims4(self.shape(x), "conv2d input")?;
        let [cout, wcin, kh, kw] = dims4(self.shape(w), "conv2d weight")?;
        if wcin != cin {
            return Err(Error::dim(format!(
                "conv2d weight {:?} expects {} input channels, input is {:?}",
                self.shape(w),
                wcin,
                self.shape(x)
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!(
                    "conv2d bias {:?} does not match {} output channels",
                    self.shape(b),
                    cout
                )));
            }
        }
        let gm = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: conv_output_size(h, kh, stride, pad),
            wo: conv_output_size(wd, kw, stride, pad),
        };
        let (rows, p) = (gm.col_rows(), gm.col_cols());
        let xv = self.value(x);
        let wv = self.value(w);
        let mut out = vec![0.0; batch * cout * p];
        let mut cols = if gm.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * p]
        };
        for n in 0..batch {
            let img = &xv[n * cin * h * wd..(n + 1) * cin * h * wd];
            let dst = &mut out[n * cout * p..(n + 1) * cout * p];
            let src = if gm.is_pointwise() {
                img
            } else {
                im2col(img, &gm, &mut cols);
                &cols
            };
            gemm(cout, rows, p, wv, false, src, false, 0.0, dst);
            if let Some(b) = b {
                for (co, &bias) in self.value(b).iter().enumerate() {
                    dst[co * p..(co + 1) * p]
                        .iter_mut()
                        .for_each(|v| *v += bias);
                }
            }
        }
        Ok(self.push(
            vec![batch, cout, gm.ho, gm.wo],
            out,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
        ))
    }

    /// Max pooling with implicit -inf padding.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let [batch, c, h, w] = dims4(self.shape(x), "max_pool2d")?;
        if kernel > h + 2 * pad || kernel > w + 2 * pad || stride == 0 || pad >= kernel {
            return Err(Error::dim(format!(
                "invalid max_pool2d window k={kernel} s={stride} p={pad} for {h}x{w}"
            )));
        }
        let ho = conv_output_size(h, kernel, stride, pad);
        let wo = conv_output_size(w, kernel, stride, pad);
        let src = self.value(x);
        let mut value = vec![f64::NEG_INFINITY; batch * c * ho * wo];
        let mut argmax = vec![0usize; value.len()];
        for plane in 0..batch * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = (plane * ho + oy) * wo + ox;
                    for ki in 0..kernel {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kj in 0..kernel {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let at = base + iy as usize * w + ix as usize;
                            if src[at] > value[o] {
                                value[o] = src[at];
                                argmax[o] = at;
                            }
                        }
                    }
                }
            }
        }
        Ok(self.push(vec![batch, c, ho, wo], value, Op::MaxPool2d { x, argmax }))
    }

    /// Bilinear resize of every plane to `out_h x out_w` (align-corners=false).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [batch, c, h, w] = dims4(self.shape(x), "resize_bilinear")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::dim("resize target must be non-empty"));
        }
        let plan = ResizePlan::new(h, w, out_h, out_w);
        let src = self.value(x);
        let mut value = vec![0.0; batch * c * out_h * out_w];
        for (s, d) in src
            .chunks_exact(h * w)
            .zip(value.chunks_exact_mut(out_h * out_w))
        {
            plan.apply(s, d);
        }
        Ok(self.push(vec![batch, c, out_h, out_w], value, Op::Resize { x, plan }))
    }

    pub fn bilinear_upsample2x(&mut self, x: Var) -> Result<Var> {
        let [_, _, h, w] = dims4(self.shape(x), "bilinear_upsample2x")?;
        self.resize_bilinear(x, 2 * h, 2 * w)
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        out_shape: &[usize],
        g: &[f64],
        sink: &mut GradSink,
    ) {
        let [batch, cin, h, wd] = dims4(self.shape(x), "").unwrap();
        let [cout, _, kh, kw] = dims4(self.shape(w), "").unwrap();
        let gm = ConvGeom {
            cin,
            h,
            w: wd,
            kh,
            kw,
            stride,
            pad,
            ho: out_shape[2],
            wo: out_shape[3],
        };
        let (rows, p) = (gm.col_rows(), gm.col_cols());
        let xv = self.value(x);
        let wv = self.value(w);
        if let Some(b) = b {
            if sink.wants(b) {
                let mut gb = vec![0.0; cout];
                for n in 0..batch {
                    for (co, acc) in gb.iter_mut().enumerate() {
                        *acc += g[(n * cout + co) * p..(n * cout + co + 1) * p]
                            .iter()
                            .sum::<f64>();
                    }
                }
                sink.add(b, gb);
            }
        }
        let want_w = sink.wants(w);
        let want_x = sink.wants(x);
        let mut gw = if want_w {
            vec![0.0; wv.len()]
        } else {
            Vec::new()
        };
        let mut gx = if want_x {
            vec![0.0; xv.len()]
        } else {
            Vec::new()
        };
        let mut cols = if gm.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * p]
        };
        let mut gcols = if gm.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * p]
        };
        for n in 0..batch {
            let img = &xv[n * cin * h * wd..(n + 1) * cin * h * wd];
            let go = &g[n * cout * p..(n + 1) * cout * p];
            if want_w {
                let src = if gm.is_pointwise() {
                    img
                } else {
                    im2col(img, &gm, &mut cols);
                    &cols
                };
                gemm(cout, p, rows, go, false, src, true, 1.0, &mut gw);
            }
            if want_x {
                let dst = &mut gx[n * cin * h * wd..(n + 1) * cin * h * wd];
                if gm.is_pointwise() {
                    gemm(rows, cout, p, wv, true, go, false, 1.0, dst);
                } else {
                    gemm(rows, cout, p, wv, true, go, false, 0.0, &mut gcols);
                    col2im(&gcols, &gm, dst);
                }
            }
        }
        if want_w {
            sink.add(w, gw);
        }
        if want_x {
            sink.add(x, gx);
        }
    }

    pub(crate) fn resize_backward(
        &self,
        x: Var,
        plan: &ResizePlan,
        g: &[f64],
        sink: &mut GradSink,
    ) {
        if !sink.wants(x) {
            return;
        }
        let mut grad = vec![0.0; self.value(x).len()];
        let (ip, op) = (plan.in_h * plan.in_w, plan.out_h * plan.out_w);
        for (gs, d) in g.chunks_exact(op).zip(grad.chunks_exact_mut(ip)) {
            plan.apply_transpose(gs, d);
        }
        sink.add(x, grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn pointwise_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let x = g.constant(&Tensor::from_vec(&[1, 1, 4, 4], data.clone()).unwrap());
        let w = g.constant(&Tensor::ones(&[1, 1, 1, 1]));
        let b = g.constant(&Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, Some(b), 1, 0).unwrap();
        assert_eq!(g.value(y), &data[..]);
    }

    #[test]
    fn output_size_and_errors() {
        assert_eq!(conv_output_size(8, 3, 1, 1), 8);
        assert_eq!(conv_output_size(8, 3, 2, 1), 4);
        assert_eq!(conv_output_size(32, 7, 2, 3), 16);
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[1, 1, 2, 2]));
        let w = g.constant(&Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(
            g.conv2d(x, w, None, 1, 0),
            Err(Error::Dimension(_))
        ));
        let w = g.constant(&Tensor::zeros(&[1, 2, 1, 1]));
        assert!(g.conv2d(x, w, None, 1, 0).is_err());
    }

    #[test]
    fn upsample_preserves_constants() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::ones(&[1, 1, 2, 2]));
        let y = g.bilinear_upsample2x(x).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 4, 4]);
        assert!(g.value(y).iter().all(|&v| v == 1.0));
        let c = g.constant(&Tensor::full(&[1, 2, 3, 5], 0.1234567));
        let y = g.resize_bilinear(c, 7, 11).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.1234567));
    }

    #[test]
    fn upsample_rows_are_monotone() {
        let mut g = Graph::new();
        let x = g.constant(&Tensor::from_vec(&[1, 1, 2, 2], vec![0., 1., 0., 1.]).unwrap());
        let y = g.bilinear_upsample2x(x).unwrap();
        for row in g.value(y).chunks(4) {
            assert_eq!(row, &[0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn max_pool_picks_window_max() {
        let mut g = Graph::new();
        let x =
            g.constant(&Tensor::from_vec(&[1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap());
        let y = g.max_pool2d(x, 3, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y), &[5., 7., 13., 15.]);
    }
}

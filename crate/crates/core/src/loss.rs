//! Boundary-weighted IoU + BCE loss with three-head deep supervision.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const BCE_CLAMP: f64 = 1e-7;
pub const IOU_EPS: f64 = 1e-8;

/// Coefficients of the fused (`alpha`), coarse (`beta`) and transformer
/// (`gamma`) heads.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.3,
            gamma: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma]
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
        {
            return Err(Error::config(format!(
                "loss weights must be finite and nonnegative, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Weights in head order (fused, transformer, coarse).
    pub fn per_head(&self) -> [f64; 3] {
        [self.alpha, self.gamma, self.beta]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Side of the mean-pool window for the boundary map (odd).
    pub boundary_kernel: usize,
    pub boundary_lambda: f64,
}

impl LossConfig {
    pub fn large() -> Self {
        Self {
            weights: LossWeights::default(),
            boundary_kernel: 15,
            boundary_lambda: 5.0,
        }
    }

    pub fn toy() -> Self {
        Self {
            boundary_kernel: 5,
            ..Self::large()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.boundary_kernel == 0 || self.boundary_kernel.is_multiple_of(2) {
            return Err(Error::config("boundary_kernel must be odd and positive"));
        }
        if !(self.boundary_lambda >= 0.0) {
            return Err(Error::config("boundary_lambda must be nonnegative"));
        }
        Ok(())
    }
}

pub const HEAD_NAMES: [&str; 3] = ["fused", "transformer", "coarse"];

/// `1 + λ·|avgpool_k(gt) − gt|` per pixel. The pool is stride 1 with
/// `k/2` padding, and padded cells are excluded from the average.
pub fn boundary_weight_map(gt: &Tensor, k: usize, lambda: f64) -> Result<Tensor> {
    let s = gt.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::dim(format!(
            "boundary_weight_map expects [B,1,H,W], got {:?}",
            s
        )));
    }
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::config("boundary kernel must be odd and positive"));
    }
    let (h, w) = (s[2], s[3]);
    let r = k / 2;
    let mut out = Vec::with_capacity(gt.numel());
    for plane in gt.data().chunks(h * w) {
        // summed-area table with a zero border row/column
        let mut sat = vec![0.0; (h + 1) * (w + 1)];
        for y in 0..h {
            let mut row = 0.0;
            for x in 0..w {
                row += plane[y * w + x];
                sat[(y + 1) * (w + 1) + x + 1] = sat[y * (w + 1) + x + 1] + row;
            }
        }
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for x in 0..w {
                let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
                let sum = sat[y1 * (w + 1) + x1] - sat[y0 * (w + 1) + x1] - sat[y1 * (w + 1) + x0]
                    + sat[y0 * (w + 1) + x0];
                let mean = sum / ((y1 - y0) * (x1 - x0)) as f64;
                out.push(1.0 + lambda * (mean - plane[y * w + x]).abs());
            }
        }
    }
    Tensor::from_vec(s, out)
}

fn check_same(g: &Graph, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::dim(format!(
            "{what}: prediction {:?} and target {:?} differ in shape",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// `−Σ w·[gt·ln p + (1−gt)·ln(1−p)] / Σ w`, `p` clamped to `[1e-7, 1−1e-7]`.
pub fn weighted_bce(g: &mut Graph, pred: Var, gt: Var, w: Var) -> Result<Var> {
    check_same(g, pred, gt, "weighted_bce")?;
    check_same(g, pred, w, "weighted_bce")?;
    let total_w: f64 = g.value(w).iter().sum();
    if !(total_w > 0.0) {
        return Err(Error::Numeric("weighted_bce: weights sum to zero".into()));
    }
    let p = g.clamp(pred, BCE_CLAMP, 1.0 - BCE_CLAMP);
    let lp = g.ln(p)?;
    let q = g.one_minus(p);
    let lq = g.ln(q)?;
    let not_gt = g.one_minus(gt);
    let pos = g.hadamard(gt, lp)?;
    let neg = g.hadamard(not_gt, lq)?;
    let ll = g.add(pos, neg)?;
    let wll = g.hadamard(w, ll)?;
    let s = g.sum(wll);
    let sw = g.sum(w);
    let mean = g.div(s, sw)?;
    Ok(g.scale(mean, -1.0))
}

/// `1 − (Σ w·p·gt + ε) / (Σ w·(p + gt − p·gt) + ε)`.
pub fn weighted_iou(g: &mut Graph, pred: Var, gt: Var, w: Var) -> Result<Var> {
    check_same(g, pred, gt, "weighted_iou")?;
    check_same(g, pred, w, "weighted_iou")?;
    let pg = g.hadamard(pred, gt)?;
    let inter = g.hadamard(w, pg)?;
    let inter = g.sum(inter);
    let s = g.add(pred, gt)?;
    let un = g.sub(s, pg)?;
    let un = g.hadamard(w, un)?;
    let un = g.sum(un);
    let num = g.add_scalar(inter, IOU_EPS);
    let den = g.add_scalar(un, IOU_EPS);
    let ratio = g.div(num, den)?;
    Ok(g.one_minus(ratio))
}

/// `L = L_iou + L_bce` for one head.
pub fn segmentation_loss(g: &mut Graph, pred: Var, gt: Var, w: Var) -> Result<Var> {
    let iou = weighted_iou(g, pred, gt, w)?;
    let bce = weighted_bce(g, pred, gt, w)?;
    g.add(iou, bce)
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    /// Unweighted per-head losses in head order (fused, transformer, coarse).
    pub per_head: [Var; 3],
}

/// `α·L(f̂²) + γ·L(t²) + β·L(f⁰)` against one target and boundary map.
pub fn total_loss(
    g: &mut Graph,
    heads: [Var; 3],
    gt: &Tensor,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let wmap = boundary_weight_map(gt, cfg.boundary_kernel, cfg.boundary_lambda)?;
    let gt = g.constant(gt);
    let w = g.constant(&wmap);
    let mut per_head = [gt; 3];
    for (slot, &h) in per_head.iter_mut().zip(&heads) {
        *slot = segmentation_loss(g, h, gt, w)?;
    }
    let coeffs = cfg.weights.per_head();
    let mut total = g.scale(per_head[0], coeffs[0]);
    for i in 1..3 {
        let term = g.scale(per_head[i], coeffs[i]);
        total = g.add(total, term)?;
    }
    Ok(LossTerms { total, per_head })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;
    use crate::tensor::grad_check;

    fn half_plane(h: usize, w: usize, edge: usize) -> Tensor {
        let data = (0..h * w)
            .map(|i| if i / w >= edge { 1.0 } else { 0.0 })
            .collect();
        Tensor::from_vec(&[1, 1, h, w], data).unwrap()
    }

    fn pool_oracle(gt: &Tensor, k: usize, lambda: f64) -> Vec<f64> {
        let (h, w) = (gt.shape()[2], gt.shape()[3]);
        let r = (k / 2) as isize;
        let mut out = vec![];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let (mut s, mut n) = (0.0, 0.0);
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            s += gt.data()[yy as usize * w + xx as usize];
                            n += 1.0;
                        }
                    }
                }
                out.push(1.0 + lambda * (s / n - gt.data()[y as usize * w + x as usize]).abs());
            }
        }
        out
    }

    #[test]
    fn constant_masks_have_unit_weight() {
        for v in [0.0, 1.0] {
            let m = boundary_weight_map(&Tensor::full(&[2, 1, 7, 9], v), 5, 5.0).unwrap();
            assert!(m.data().iter().all(|&x| x == 1.0));
        }
        let m = boundary_weight_map(&half_plane(8, 8, 4), 3, 0.0).unwrap();
        assert!(m.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn half_plane_matches_pool_oracle() {
        let gt = half_plane(8, 6, 4);
        let m = boundary_weight_map(&gt, 3, 5.0).unwrap();
        let want = pool_oracle(&gt, 3, 5.0);
        for (a, b) in m.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        // interior column, rows on each side of the edge
        assert!((m.data()[3 * 6 + 2] - (1.0 + 5.0 / 3.0)).abs() < 1e-12);
        assert!((m.data()[4 * 6 + 2] - (1.0 + 5.0 / 3.0)).abs() < 1e-12);
        assert_eq!(m.data()[0], 1.0);
        assert!(m.data().iter().all(|&x| (1.0..=6.0).contains(&x)));
    }

    fn eval(
        f: impl Fn(&mut Graph, Var, Var, Var) -> Result<Var>,
        p: &Tensor,
        t: &Tensor,
        w: &Tensor,
    ) -> f64 {
        let mut g = Graph::new();
        let (pv, tv, wv) = (g.constant(p), g.constant(t), g.constant(w));
        let l = f(&mut g, pv, tv, wv).unwrap();
        g.item(l)
    }

    #[test]
    fn bce_reference_and_edge_cases() {
        let mut rng = RngStream::from_seed(3);
        let p = Tensor::uniform(&[1, 1, 4, 4], 0.01, 0.99, &mut rng);
        let t = Tensor::from_vec(
            &[1, 1, 4, 4],
            (0..16).map(|_| f64::from(rng.bernoulli(0.5))).collect(),
        )
        .unwrap();
        let w = Tensor::uniform(&[1, 1, 4, 4], 1.0, 3.0, &mut rng);
        let got = eval(weighted_bce, &p, &t, &w);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..16 {
            let (pi, ti, wi) = (p.data()[i], t.data()[i], w.data()[i]);
            num += wi * (ti * pi.ln() + (1.0 - ti) * (1.0 - pi).ln());
            den += wi;
        }
        assert!((got + num / den).abs() < 1e-12);

        let half = Tensor::full(&[1, 1, 4, 4], 0.5);
        assert!((eval(weighted_bce, &half, &t, &w) - 2f64.ln()).abs() < 1e-12);
        assert!(eval(weighted_bce, &t, &t, &w) <= 1e-6);
    }

    #[test]
    fn iou_closed_forms() {
        let gt = half_plane(4, 4, 2);
        let w = Tensor::ones(&[1, 1, 4, 4]);
        assert!(eval(weighted_iou, &gt, &gt, &w).abs() < 1e-6);
        let ones = Tensor::ones(&[1, 1, 4, 4]);
        assert!((eval(weighted_iou, &ones, &gt, &w) - 0.5).abs() < 1e-9);
        let zeros = Tensor::zeros(&[1, 1, 4, 4]);
        assert_eq!(eval(weighted_iou, &zeros, &zeros, &w), 0.0);
    }

    #[test]
    fn iou_gradient_check() {
        let mut rng = RngStream::from_seed(4);
        let gt = half_plane(4, 4, 1);
        let w = boundary_weight_map(&gt, 3, 5.0).unwrap();
        let p = Tensor::uniform(&[1, 1, 4, 4], 0.1, 0.9, &mut rng);
        let err = grad_check(
            |g, x| {
                let (t, wv) = (g.constant(&gt), g.constant(&w));
                weighted_iou(g, x, t, wv)
            },
            &p,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn total_loss_combination() {
        let mut rng = RngStream::from_seed(5);
        let gt = half_plane(8, 8, 3);
        let preds: Vec<Tensor> = (0..3)
            .map(|_| Tensor::uniform(&[1, 1, 8, 8], 0.05, 0.95, &mut rng))
            .collect();
        let cfg = LossConfig::toy();
        let mut g = Graph::new();
        let heads = [
            g.constant(&preds[0]),
            g.constant(&preds[1]),
            g.constant(&preds[2]),
        ];
        let terms = total_loss(&mut g, heads, &gt, &cfg).unwrap();
        let w = boundary_weight_map(&gt, cfg.boundary_kernel, cfg.boundary_lambda).unwrap();
        let single: Vec<f64> = preds
            .iter()
            .map(|p| eval(segmentation_loss, p, &gt, &w))
            .collect();
        let want = 0.5 * single[0] + 0.2 * single[1] + 0.3 * single[2];
        assert!((g.item(terms.total) - want).abs() < 1e-12);

        let only_fused = LossConfig {
            weights: LossWeights {
                alpha: 1.0,
                beta: 0.0,
                gamma: 0.0,
            },
            ..cfg
        };
        let mut g = Graph::new();
        let heads = [
            g.constant(&preds[0]),
            g.constant(&preds[1]),
            g.constant(&preds[2]),
        ];
        let terms = total_loss(&mut g, heads, &gt, &only_fused).unwrap();
        assert_eq!(g.item(terms.total), single[0]);

        let mut g = Graph::new();
        let heads = [g.constant(&gt); 3];
        let terms = total_loss(&mut g, heads, &gt, &cfg).unwrap();
        assert!(g.item(terms.total) <= 1e-5);
    }
}

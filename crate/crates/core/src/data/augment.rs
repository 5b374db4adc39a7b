//! Seeded geometric and photometric augmentation.
//!
//! Geometric ops run directly on the normalized image with the border filled
//! by normalized black, which equals warping the raw image with a zero fill
//! (bilinear weights sum to one). Color jitter needs raw RGB, so it
//! denormalizes, jitters, clamps to `[0, 1]` and normalizes again.

use super::{denormalize, normalize, normalized_black, SegSample};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    /// Maximum translation as a fraction of width/height.
    pub shift_limit: f64,
    /// Scale factor drawn from `1 ± scale_limit`.
    pub scale_limit: f64,
    /// Maximum rotation in degrees.
    pub rotate_limit: f64,
    pub p_affine: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub p_jitter: f64,
    pub p_hflip: f64,
    pub p_vflip: f64,
    /// Root of the per-sample augmentation streams.
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            shift_limit: 0.15,
            scale_limit: 0.15,
            rotate_limit: 25.0,
            p_affine: 0.5,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
            p_jitter: 0.5,
            p_hflip: 0.5,
            p_vflip: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// Every probability zero: augmentation is the identity.
    pub fn disabled() -> Self {
        Self {
            p_affine: 0.0,
            p_jitter: 0.0,
            p_hflip: 0.0,
            p_vflip: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("p_affine", self.p_affine),
            ("p_jitter", self.p_jitter),
            ("p_hflip", self.p_hflip),
            ("p_vflip", self.p_vflip),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, v) in [
            ("shift_limit", self.shift_limit),
            ("scale_limit", self.scale_limit),
            ("rotate_limit", self.rotate_limit),
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(v >= 0.0) {
                return Err(Error::config(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        if self.scale_limit >= 1.0 || self.hue > 0.5 {
            return Err(Error::config("scale_limit must be < 1 and hue <= 0.5"));
        }
        Ok(())
    }

    /// Stream for one sample in one epoch, independent of visiting order.
    pub fn stream(&self, id: &str, epoch: usize) -> RngStream {
        RngStream::from_seed(self.seed)
            .split(epoch as u64)
            .split_str(id)
    }
}

/// Shift (pixels), isotropic scale and rotation (degrees) about the image
/// center.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub dx: f64,
    pub dy: f64,
    pub scale: f64,
    pub angle_deg: f64,
}

impl Affine {
    pub fn identity() -> Self {
        Self {
            dx: 0.0,
            dy: 0.0,
            scale: 1.0,
            angle_deg: 0.0,
        }
    }

    /// Source coordinate `(x, y)` sampled by output pixel `(col, row)`.
    fn source(&self, col: f64, row: f64, cx: f64, cy: f64) -> (f64, f64) {
        let (sin, cos) = self.angle_deg.to_radians().sin_cos();
        let (u, v) = (col - cx - self.dx, row - cy - self.dy);
        // inverse rotation, then inverse scale
        let (ru, rv) = (cos * u + sin * v, -sin * u + cos * v);
        (cx + ru / self.scale, cy + rv / self.scale)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interp {
    Bilinear,
    Nearest,
}

/// Warps an `h×w` plane; samples falling outside the source take `fill`.
pub fn warp_plane(
    src: &[f64],
    h: usize,
    w: usize,
    affine: &Affine,
    fill: f64,
    interp: Interp,
) -> Vec<f64> {
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let at = |x: isize, y: isize| {
        if x < 0 || y < 0 || x >= w as isize || y >= h as isize {
            fill
        } else {
            src[y as usize * w + x as usize]
        }
    };
    let mut out = Vec::with_capacity(h * w);
    for row in 0..h {
        for col in 0..w {
            let (sx, sy) = affine.source(col as f64, row as f64, cx, cy);
            let v = match interp {
                Interp::Nearest => at(sx.round() as isize, sy.round() as isize),
                Interp::Bilinear => {
                    let (x0, y0) = (sx.floor(), sy.floor());
                    let (fx, fy) = (sx - x0, sy - y0);
                    let (x0, y0) = (x0 as isize, y0 as isize);
                    let top = at(x0, y0) * (1.0 - fx) + at(x0 + 1, y0) * fx;
                    let bottom = at(x0, y0 + 1) * (1.0 - fx) + at(x0 + 1, y0 + 1) * fx;
                    if fy == 0.0 {
                        if fx == 0.0 {
                            at(x0, y0)
                        } else {
                            top
                        }
                    } else {
                        top * (1.0 - fy) + bottom * fy
                    }
                }
            };
            out.push(v);
        }
    }
    out
}

fn flip_rows(data: &mut [f64], w: usize) {
    data.chunks_mut(w).for_each(|row| row.reverse());
}

fn flip_cols(data: &mut [f64], h: usize, w: usize) {
    let planes = data.len() / (h * w);
    for p in 0..planes {
        let plane = &mut data[p * h * w..(p + 1) * h * w];
        for r in 0..h / 2 {
            let (a, b) = plane.split_at_mut((h - 1 - r) * w);
            a[r * w..(r + 1) * w].swap_with_slice(&mut b[..w]);
        }
    }
}

/// Horizontal flip of image and mask.
pub fn hflip(s: &SegSample) -> SegSample {
    let mut out = s.clone();
    let w = s.size().1;
    flip_rows(out.image.data_mut(), w);
    flip_rows(out.mask.data_mut(), w);
    out
}

/// Vertical flip of image and mask.
pub fn vflip(s: &SegSample) -> SegSample {
    let mut out = s.clone();
    let (h, w) = s.size();
    flip_cols(out.image.data_mut(), h, w);
    flip_cols(out.mask.data_mut(), h, w);
    out
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u8 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Brightness, contrast, saturation and hue on raw `[3, H, W]` RGB.
fn jitter(raw: &mut [f64], cfg: &AugmentConfig, rng: &mut RngStream) {
    let n = raw.len() / 3;
    let factor = |rng: &mut RngStream, k: f64| rng.uniform_range((1.0 - k).max(0.0), 1.0 + k);
    let brightness = factor(rng, cfg.brightness);
    let contrast = factor(rng, cfg.contrast);
    let saturation = factor(rng, cfg.saturation);
    let hue = rng.uniform_range(-cfg.hue, cfg.hue);

    raw.iter_mut()
        .for_each(|v| *v = (*v * brightness).clamp(0.0, 1.0));
    let mean_gray = (0..n)
        .map(|i| luma(raw[i], raw[n + i], raw[2 * n + i]))
        .sum::<f64>()
        / n as f64;
    raw.iter_mut()
        .for_each(|v| *v = ((*v - mean_gray) * contrast + mean_gray).clamp(0.0, 1.0));
    for i in 0..n {
        let gray = luma(raw[i], raw[n + i], raw[2 * n + i]);
        for c in 0..3 {
            let v = &mut raw[c * n + i];
            *v = ((*v - gray) * saturation + gray).clamp(0.0, 1.0);
        }
    }
    if hue != 0.0 {
        for i in 0..n {
            let (h, s, v) = rgb_to_hsv(raw[i], raw[n + i], raw[2 * n + i]);
            let (r, g, b) = hsv_to_rgb(h + hue, s, v);
            raw[i] = r.clamp(0.0, 1.0);
            raw[n + i] = g.clamp(0.0, 1.0);
            raw[2 * n + i] = b.clamp(0.0, 1.0);
        }
    }
}

/// Applies the configured random transforms. The outcome depends only on
/// the sample, the config and the stream.
pub fn augment(sample: &SegSample, cfg: &AugmentConfig, rng: &mut RngStream) -> SegSample {
    let (h, w) = sample.size();
    let n = h * w;
    let mut out = sample.clone();

    if rng.bernoulli(cfg.p_affine) {
        let affine = Affine {
            dx: rng.uniform_range(-cfg.shift_limit, cfg.shift_limit) * w as f64,
            dy: rng.uniform_range(-cfg.shift_limit, cfg.shift_limit) * h as f64,
            scale: 1.0 + rng.uniform_range(-cfg.scale_limit, cfg.scale_limit),
            angle_deg: rng.uniform_range(-cfg.rotate_limit, cfg.rotate_limit),
        };
        let black = normalized_black();
        let mut image = Vec::with_capacity(3 * n);
        for (plane, &fill) in out.image.data().chunks(n).zip(&black) {
            image.extend(warp_plane(plane, h, w, &affine, fill, Interp::Bilinear));
        }
        out.image.data_mut().copy_from_slice(&image);
        let mask = warp_plane(out.mask.data(), h, w, &affine, 0.0, Interp::Nearest);
        out.mask
            .data_mut()
            .iter_mut()
            .zip(mask)
            .for_each(|(d, v)| *d = if v >= 0.5 { 1.0 } else { 0.0 });
    }

    if rng.bernoulli(cfg.p_jitter) {
        let data = out.image.data_mut();
        denormalize(data);
        data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        jitter(data, cfg, rng);
        normalize(data);
    }

    if rng.bernoulli(cfg.p_hflip) {
        out = hflip(&out);
    }
    if rng.bernoulli(cfg.p_vflip) {
        out = vflip(&out);
    }
    out
}

/// Convenience for tests: image and mask from raw planes.
#[cfg(test)]
pub(crate) fn sample_from_raw(raw: Vec<f64>, mask: Vec<f64>, h: usize, w: usize) -> SegSample {
    let mut raw = raw;
    normalize(&mut raw);
    SegSample::new(
        crate::tensor::Tensor::from_vec(&[3, h, w], raw).unwrap(),
        crate::tensor::Tensor::from_vec(&[1, h, w], mask).unwrap(),
        "t",
    )
    .unwrap()
}

//! Synthetic lesion images: a filled ellipse on skin-toned noise, with
//! optional dark hair strokes. The mask is the exact ellipse interior.

use super::{normalize, SegSample};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    /// (height, width)
    pub size: (usize, usize),
    /// Fractional darkening of the lesion relative to the skin color.
    pub contrast: f64,
    pub noise_std: f64,
    pub hair_prob: f64,
    pub min_area: f64,
    pub max_area: f64,
}

impl SynthConfig {
    pub fn new(size: (usize, usize)) -> Self {
        Self {
            size,
            contrast: 0.5,
            noise_std: 0.03,
            hair_prob: 0.5,
            min_area: 0.02,
            max_area: 0.6,
        }
    }
}

fn rasterize(h: usize, w: usize, cx: f64, cy: f64, a: f64, b: f64, theta: f64) -> Vec<f64> {
    let (sin, cos) = theta.sin_cos();
    let mut m = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let u = cos * dx + sin * dy;
            let v = -sin * dx + cos * dy;
            m.push(if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                1.0
            } else {
                0.0
            });
        }
    }
    m
}

fn one(cfg: &SynthConfig, rng: &mut RngStream, id: String) -> Result<SegSample> {
    let (h, w) = cfg.size;
    let (hf, wf) = (h as f64, w as f64);
    let mask = loop {
        let area = rng.uniform_range(
            cfg.min_area.max(0.0) + 0.01,
            (cfg.max_area - 0.05).max(cfg.min_area + 0.02),
        );
        let aspect = rng.uniform_range(0.6, 1.0);
        // π·a·b = area·H·W with b = aspect·a
        let a = (area * hf * wf / (std::f64::consts::PI * aspect)).sqrt();
        let b = aspect * a;
        let cx = rng.uniform_range(0.3, 0.7) * wf;
        let cy = rng.uniform_range(0.3, 0.7) * hf;
        let theta = rng.uniform_range(0.0, std::f64::consts::PI);
        let m = rasterize(h, w, cx, cy, a, b, theta);
        let frac = m.iter().sum::<f64>() / (hf * wf);
        if (cfg.min_area..=cfg.max_area).contains(&frac) {
            break m;
        }
    };

    let skin = [
        rng.uniform_range(0.75, 0.95),
        rng.uniform_range(0.55, 0.75),
        rng.uniform_range(0.45, 0.65),
    ];
    let darken = cfg.contrast * rng.uniform_range(0.8, 1.2);
    let lesion = [
        skin[0] * (1.0 - darken),
        skin[1] * (1.0 - 1.15 * darken).max(0.05),
        skin[2] * (1.0 - 1.1 * darken).max(0.05),
    ];
    let n = h * w;
    let mut raw = vec![0.0; 3 * n];
    for i in 0..n {
        let base = if mask[i] == 1.0 { &lesion } else { &skin };
        for c in 0..3 {
            raw[c * n + i] = base[c] + cfg.noise_std * rng.normal();
        }
    }

    if rng.bernoulli(cfg.hair_prob) {
        let strokes = 1 + rng.below(3);
        for _ in 0..strokes {
            // a line through a point near the frame center
            let (px, py) = (
                rng.uniform_range(0.35, 0.65) * wf,
                rng.uniform_range(0.35, 0.65) * hf,
            );
            let phi = rng.uniform_range(0.0, std::f64::consts::PI);
            let (nx, ny) = (-phi.sin(), phi.cos());
            let shade = rng.uniform_range(0.05, 0.2);
            for y in 0..h {
                for x in 0..w {
                    let d = (x as f64 + 0.5 - px) * nx + (y as f64 + 0.5 - py) * ny;
                    if d.abs() < 0.6 {
                        for c in 0..3 {
                            raw[c * n + y * w + x] = shade;
                        }
                    }
                }
            }
        }
    }

    raw.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    normalize(&mut raw);
    SegSample::new(
        Tensor::from_vec(&[3, h, w], raw)?,
        Tensor::from_vec(&[1, h, w], mask)?,
        id,
    )
}

/// `n` samples fully determined by `(n, seed, cfg)`; sample `i` depends
/// only on `seed` and `i`.
pub fn synth_dataset_with(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<SegSample>> {
    if cfg.size.0 < 8 || cfg.size.1 < 8 {
        return Err(Error::config("synthetic images must be at least 8x8"));
    }
    if !(0.0 < cfg.min_area && cfg.min_area + 0.1 <= cfg.max_area && cfg.max_area <= 1.0) {
        return Err(Error::config(
            "synthetic lesion area bounds are inconsistent",
        ));
    }
    let root = RngStream::from_seed(seed).split_str("synth");
    (0..n)
        .map(|i| one(cfg, &mut root.split(i as u64), format!("synth_{i:05}")))
        .collect()
}

pub fn synth_dataset(n: usize, seed: u64, size: (usize, usize)) -> Result<Vec<SegSample>> {
    synth_dataset_with(n, seed, &SynthConfig::new(size))
}

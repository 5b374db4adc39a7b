//! Samples, normalization, batching and the dataset sources.

mod augment;
mod io;
mod synth;

pub use augment::{augment, hflip, vflip, warp_plane, Affine, AugmentConfig, Interp};
pub use io::{
    load_isic_dir, load_manifest, load_sample, pair_isic_dir, read_rgb, save_mask_png,
    save_overlay_png, IsicPair, ManifestEntry, SkipReport, MASK_SUFFIX,
};
pub use synth::{synth_dataset, synth_dataset_with, SynthConfig};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-channel RGB mean and standard deviation applied after scaling to
/// `[0, 1]`.
pub const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// A normalized image `[3, H, W]` with its binary mask `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SegSample {
    pub image: Tensor,
    pub mask: Tensor,
    pub id: String,
}

impl SegSample {
    pub fn new(image: Tensor, mask: Tensor, id: impl Into<String>) -> Result<Self> {
        let (si, sm) = (image.shape(), mask.shape());
        if si.len() != 3 || si[0] != 3 || sm.len() != 3 || sm[0] != 1 || si[1..] != sm[1..] {
            return Err(Error::dim(format!(
                "image {:?} and mask {:?} do not form a sample",
                si, sm
            )));
        }
        Ok(Self {
            image,
            mask,
            id: id.into(),
        })
    }

    pub fn size(&self) -> (usize, usize) {
        (self.image.shape()[1], self.image.shape()[2])
    }

    pub fn mask_is_binary(&self) -> bool {
        self.mask.data().iter().all(|&v| v == 0.0 || v == 1.0)
    }
}

/// `[3, H, W]` RGB in `[0, 1]` to normalized values, in place.
pub fn normalize(planes: &mut [f64]) {
    let n = planes.len() / 3;
    for (c, plane) in planes.chunks_mut(n).enumerate() {
        plane.iter_mut().for_each(|v| *v = (*v - MEAN[c]) / STD[c]);
    }
}

pub fn denormalize(planes: &mut [f64]) {
    let n = planes.len() / 3;
    for (c, plane) in planes.chunks_mut(n).enumerate() {
        plane.iter_mut().for_each(|v| *v = *v * STD[c] + MEAN[c]);
    }
}

/// The normalized value of a black pixel per channel.
pub fn normalized_black() -> [f64; 3] {
    [0, 1, 2].map(|c| -MEAN[c] / STD[c])
}

/// Stacks samples into `([B, 3, H, W], [B, 1, H, W])`.
pub fn stack_batch(samples: &[&SegSample]) -> Result<(Tensor, Tensor)> {
    let images: Vec<&Tensor> = samples.iter().map(|s| &s.image).collect();
    let masks: Vec<&Tensor> = samples.iter().map(|s| &s.mask).collect();
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

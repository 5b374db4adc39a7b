//! Image/mask files: single pairs, ISIC-style directories, JSON manifests
//! and PNG output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use super::{normalize, SegSample};
use crate::error::{Error, Result};
use crate::tensor::{bilinear_resize_plane, Tensor};

/// Mask file name is `<image stem>_segmentation.png`.
pub const MASK_SUFFIX: &str = "_segmentation";

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

fn ingest(path: &Path, reason: impl ToString) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    let img = ImageReader::open(path)
        .map_err(|e| ingest(path, e))?
        .with_guessed_format()
        .map_err(|e| ingest(path, e))?
        .decode()
        .map_err(|e| ingest(path, e))?;
    if img.width() == 0 || img.height() == 0 {
        return Err(ingest(path, "image has a zero dimension"));
    }
    Ok(img)
}

/// Raw RGB planes `[3, H, W]` in `[0, 1]`, plus `(H, W)`.
pub fn read_rgb(path: &Path) -> Result<(Vec<f64>, (usize, usize))> {
    let rgb = open(path)?.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut planes = vec![0.0; 3 * h * w];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            planes[c * h * w + i] = f64::from(px[c]) / 255.0;
        }
    }
    Ok((planes, (h, w)))
}

fn nearest_index(dst: usize, out: usize, input: usize) -> usize {
    (((dst as f64 + 0.5) * input as f64 / out as f64).floor() as usize).min(input - 1)
}

/// Loads and resizes a pair: bilinear for the image, nearest for the mask,
/// which is then thresholded at 127.
pub fn load_sample(image_path: &Path, mask_path: &Path, size: (usize, usize)) -> Result<SegSample> {
    let (raw, (h, w)) = read_rgb(image_path)?;
    let mask = open(mask_path)?.to_luma8();
    let (mh, mw) = (mask.height() as usize, mask.width() as usize);
    if (mh, mw) != (h, w) {
        return Err(ingest(
            mask_path,
            format!(
                "mask is {mh}x{mw} but image {} is {h}x{w}",
                image_path.display()
            ),
        ));
    }
    let (oh, ow) = size;
    let mut image = Vec::with_capacity(3 * oh * ow);
    for plane in raw.chunks(h * w) {
        if (h, w) == size {
            image.extend_from_slice(plane);
        } else {
            image.extend(bilinear_resize_plane(plane, h, w, oh, ow));
        }
    }
    normalize(&mut image);
    let mut m = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let sy = nearest_index(y, oh, h);
        for x in 0..ow {
            let sx = nearest_index(x, ow, w);
            m.push(if mask.get_pixel(sx as u32, sy as u32)[0] > 127 {
                1.0
            } else {
                0.0
            });
        }
    }
    let id = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    SegSample::new(
        Tensor::from_vec(&[3, oh, ow], image)?,
        Tensor::from_vec(&[1, oh, ow], m)?,
        id,
    )
}

/// Files that could not be paired or loaded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SkipReport {
    pub entries: Vec<(PathBuf, String)>,
}

impl SkipReport {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }
}

fn listing(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(|e| ingest(dir, e))? {
        let path = entry.map_err(|e| ingest(dir, e))?.path();
        let ext = path
            .extension()
            .map(|e| e.to_string_lossy().to_ascii_lowercase())
            .unwrap_or_default();
        if path.is_file() && IMAGE_EXTENSIONS.contains(&ext.as_str()) {
            if let Some(stem) = path.file_stem() {
                out.insert(stem.to_string_lossy().into_owned(), path);
            }
        }
    }
    Ok(out)
}

/// `(stem, image path, mask path)`.
pub type IsicPair = (String, PathBuf, PathBuf);

/// Pairs `<stem>.<ext>` in `images_dir` with `<stem>_segmentation.<ext>` in
/// `masks_dir`, sorted by stem.
pub fn pair_isic_dir(images_dir: &Path, masks_dir: &Path) -> Result<(Vec<IsicPair>, SkipReport)> {
    let images = listing(images_dir)?;
    let mut masks = listing(masks_dir)?;
    let mut pairs = Vec::new();
    let mut report = SkipReport::default();
    for (stem, path) in images {
        if stem.ends_with(MASK_SUFFIX) && images_dir == masks_dir {
            continue;
        }
        match masks.remove(&format!("{stem}{MASK_SUFFIX}")) {
            Some(mask) => pairs.push((stem, path, mask)),
            None => report.entries.push((path, "no matching mask".into())),
        }
    }
    for (stem, path) in masks {
        if stem.ends_with(MASK_SUFFIX) {
            report.entries.push((path, "no matching image".into()));
        }
    }
    report.entries.sort();
    Ok((pairs, report))
}

/// Loads every matched pair; unmatched or unreadable files go to the report.
pub fn load_isic_dir(
    images_dir: &Path,
    masks_dir: &Path,
    size: (usize, usize),
) -> Result<(Vec<SegSample>, SkipReport)> {
    let (pairs, mut report) = pair_isic_dir(images_dir, masks_dir)?;
    let mut samples = Vec::with_capacity(pairs.len());
    for (_, img, mask) in pairs {
        match load_sample(&img, &mask, size) {
            Ok(s) => samples.push(s),
            Err(e) => report.entries.push((img, e.to_string())),
        }
    }
    Ok((samples, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub id: Option<String>,
}

/// Loads a JSON list of `{image, mask, id}`; relative paths resolve against
/// the manifest's directory.
pub fn load_manifest(path: &Path, size: (usize, usize)) -> Result<Vec<SegSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| ingest(path, e))?;
    let entries: Vec<ManifestEntry> = serde_json::from_str(&text).map_err(|e| ingest(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    entries
        .into_iter()
        .map(|e| {
            let mut s = load_sample(&base.join(&e.image), &base.join(&e.mask), size)?;
            if let Some(id) = e.id {
                s.id = id;
            }
            Ok(s)
        })
        .collect()
}

/// Writes a 0/255 mask PNG.
pub fn save_mask_png(path: &Path, mask: &[bool], h: usize, w: usize) -> Result<()> {
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([if mask[y as usize * w + x as usize] {
            255
        } else {
            0
        }])
    });
    img.save(path)?;
    Ok(())
}

/// Writes the raw image with mask boundary pixels painted in `color`.
pub fn save_overlay_png(
    path: &Path,
    raw: &[f64],
    mask: &[bool],
    h: usize,
    w: usize,
    color: [u8; 3],
) -> Result<()> {
    let n = h * w;
    let boundary = |x: usize, y: usize| {
        let m = mask[y * w + x];
        m && [(0isize, -1isize), (0, 1), (-1, 0), (1, 0)]
            .iter()
            .any(|&(dx, dy)| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx < 0
                    || ny < 0
                    || nx >= w as isize
                    || ny >= h as isize
                    || !mask[ny as usize * w + nx as usize]
            })
    };
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        if boundary(x, y) {
            Rgb(color)
        } else {
            let px = |c: usize| (raw[c * n + y * w + x].clamp(0.0, 1.0) * 255.0).round() as u8;
            Rgb([px(0), px(1), px(2)])
        }
    });
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_rgb(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> [u8; 3]) {
        RgbImage::from_fn(w, h, |x, y| Rgb(f(x, y)))
            .save(path)
            .unwrap();
    }

    fn write_gray(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        GrayImage::from_fn(w, h, |x, y| image::Luma([f(x, y)]))
            .save(path)
            .unwrap();
    }

    #[test]
    fn mid_gray_and_white_mask() {
        let dir = tempfile::tempdir().unwrap();
        let (img, mask) = (
            dir.path().join("a.png"),
            dir.path().join("a_segmentation.png"),
        );
        write_rgb(&img, 40, 30, |_, _| [128, 128, 128]);
        write_gray(&mask, 40, 30, |_, _| 255);
        let s = load_sample(&img, &mask, (16, 32)).unwrap();
        assert_eq!(s.image.shape(), &[3, 16, 32]);
        assert!(s.mask.data().iter().all(|&v| v == 1.0));
        assert!((s.image.data()[0] - 0.0741).abs() < 1e-4);
        assert_eq!(s.id, "a");
    }

    #[test]
    fn native_size_is_only_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let (img, mask) = (
            dir.path().join("b.png"),
            dir.path().join("b_segmentation.png"),
        );
        write_rgb(&img, 8, 6, |x, y| [(x * 30) as u8, (y * 40) as u8, 7]);
        write_gray(&mask, 8, 6, |x, _| if x < 4 { 0 } else { 200 });
        let s = load_sample(&img, &mask, (6, 8)).unwrap();
        let (raw, _) = read_rgb(&img).unwrap();
        let mut want = raw.clone();
        normalize(&mut want);
        assert_eq!(s.image.data(), &want[..]);
        assert_eq!(s.mask.data()[3], 0.0);
        assert_eq!(s.mask.data()[4], 1.0);
    }

    #[test]
    fn ingestion_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let img = dir.path().join("c.png");
        let mask = dir.path().join("c_segmentation.png");
        write_rgb(&img, 8, 8, |_, _| [0, 0, 0]);
        write_gray(&mask, 4, 8, |_, _| 0);
        match load_sample(&img, &mask, (8, 8)) {
            Err(Error::Ingest { path, .. }) => assert_eq!(path, mask),
            other => panic!("{other:?}"),
        }
        let missing = dir.path().join("nope.png");
        assert!(matches!(
            load_sample(&missing, &mask, (8, 8)),
            Err(Error::Ingest { .. })
        ));
    }

    #[test]
    fn isic_pairing_and_skip_report() {
        let dir = tempfile::tempdir().unwrap();
        let (imgs, masks) = (dir.path().join("img"), dir.path().join("gt"));
        std::fs::create_dir_all(&imgs).unwrap();
        std::fs::create_dir_all(&masks).unwrap();
        for stem in ["ISIC_002", "ISIC_001", "ISIC_003"] {
            write_rgb(&imgs.join(format!("{stem}.png")), 8, 8, |_, _| [10, 20, 30]);
        }
        for stem in ["ISIC_001", "ISIC_002", "ISIC_009"] {
            write_gray(
                &masks.join(format!("{stem}{MASK_SUFFIX}.png")),
                8,
                8,
                |_, _| 255,
            );
        }
        let (samples, report) = load_isic_dir(&imgs, &masks, (8, 8)).unwrap();
        let ids: Vec<_> = samples.iter().map(|s| s.id.as_str()).collect();
        assert_eq!(ids, ["ISIC_001", "ISIC_002"]);
        assert_eq!(report.len(), 2);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        write_rgb(&dir.path().join("x.png"), 8, 8, |_, _| [1, 2, 3]);
        write_gray(&dir.path().join("x_m.png"), 8, 8, |_, _| 0);
        let entries = vec![ManifestEntry {
            image: "x.png".into(),
            mask: "x_m.png".into(),
            id: Some("first".into()),
        }];
        let path = dir.path().join("manifest.json");
        std::fs::write(&path, serde_json::to_string(&entries).unwrap()).unwrap();
        let s = load_manifest(&path, (8, 8)).unwrap();
        assert_eq!(s[0].id, "first");
    }
}

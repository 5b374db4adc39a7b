//! Run configuration and its flat `key = value` text form.
//!
//! Lines are `key = value`; blank lines and `#` comments are ignored. A
//! `preset` key, wherever it appears, is applied first so the other keys
//! override the preset's defaults. [`TrainConfig::to_text`] writes every key,
//! and parsing that text reproduces the config exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::{ModelConfig, Preset};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    /// Linear from `lr` at the first epoch to `lr_final` at the last.
    Linear,
    Constant,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic {
        n: usize,
    },
    /// ISIC layout: `<id>.jpg` images and `<id>_segmentation.png` masks.
    Isic {
        images: PathBuf,
        masks: PathBuf,
    },
    /// JSON list of `{image, mask, id}`.
    Manifest(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_final: f64,
    pub schedule: LrSchedule,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub data: DataSource,
    /// Fraction of samples held out for validation; 0 validates on the
    /// training set.
    pub val_fraction: f64,
    pub eval_interval: usize,
    pub threshold: f64,
    pub augment: Option<AugmentConfig>,
    /// Checkpoint written every epoch and at the end.
    pub checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    /// Desk-scale defaults: toy model, 8 synthetic samples, batch 4.
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(),
            seed: 42,
            epochs: 250,
            batch_size: 4,
            lr: 1e-2,
            lr_final: 1e-3,
            schedule: LrSchedule::Linear,
            clip_norm: Some(5.0),
            data: DataSource::Synthetic { n: 8 },
            val_fraction: 0.0,
            eval_interval: 25,
            threshold: 0.5,
            augment: None,
            checkpoint: None,
        }
    }

    /// Full-size model and schedule: 30 epochs, batch 16,
    /// Adam from 1e-4 down to 7e-5.
    pub fn large() -> Self {
        Self {
            model: ModelConfig::large(),
            epochs: 30,
            batch_size: 16,
            lr: 1e-4,
            lr_final: 7e-5,
            eval_interval: 1,
            val_fraction: 0.1,
            augment: Some(AugmentConfig::default()),
            ..Self::toy()
        }
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Toy => Self::toy(),
            Preset::Large => Self::large(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.eval_interval == 0 {
            return Err(Error::config(
                "epochs, batch_size and eval_interval must be at least 1",
            ));
        }
        if !(self.lr > 0.0) || !(self.lr_final > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::config(
                    "clip_norm must be positive (use 0 in a config file to disable)",
                ));
            }
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("threshold must lie in [0, 1]"));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Linear if self.epochs <= 1 => self.lr,
            LrSchedule::Linear => {
                let t = epoch.min(self.epochs - 1) as f64 / (self.epochs - 1) as f64;
                self.lr + (self.lr_final - self.lr) * t
            }
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::config(format!(
                    "line {}: expected key = value, got {line:?}",
                    no + 1
                ))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let preset = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, v)) => v.parse()?,
            None => Preset::Toy,
        };
        let mut cfg = Self::from_preset(preset);
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::config(format!("invalid value {v:?} for {key}")))
        }
        fn list<const N: usize>(key: &str, v: &str) -> Result<[usize; N]> {
            let items: Vec<usize> = v
                .split(',')
                .map(|s| num(key, s.trim()))
                .collect::<Result<_>>()?;
            items
                .try_into()
                .map_err(|_| Error::config(format!("{key} needs {N} comma-separated values")))
        }
        if let Some(k) = key.strip_prefix("aug_") {
            let a = self.augment.get_or_insert_with(AugmentConfig::default);
            match k {
                "shift_limit" => a.shift_limit = num(key, value)?,
                "scale_limit" => a.scale_limit = num(key, value)?,
                "rotate_limit" => a.rotate_limit = num(key, value)?,
                "p_affine" => a.p_affine = num(key, value)?,
                "brightness" => a.brightness = num(key, value)?,
                "contrast" => a.contrast = num(key, value)?,
                "saturation" => a.saturation = num(key, value)?,
                "hue" => a.hue = num(key, value)?,
                "p_jitter" => a.p_jitter = num(key, value)?,
                "p_hflip" => a.p_hflip = num(key, value)?,
                "p_vflip" => a.p_vflip = num(key, value)?,
                "seed" => a.seed = num(key, value)?,
                _ => return Err(Error::config(format!("unknown key {key:?}"))),
            }
            return Ok(());
        }
        let m = &mut self.model;
        match key {
            "preset" => {
                let p: Preset = value.parse()?;
                if p != m.preset {
                    return Err(Error::config("preset must be set before other keys"));
                }
            }
            "image_height" => m.image_size.0 = num(key, value)?,
            "image_width" => m.image_size.1 = num(key, value)?,
            "cnn_stem_channels" => m.cnn.stem_channels = num(key, value)?,
            "cnn_channels" => {
                m.cnn.block_channels = list(key, value)?;
                m.fusion.interaction_dims = m.cnn.feature_channels();
            }
            "cnn_blocks" => m.cnn.blocks_per_stage = list(key, value)?,
            "patch_size" => m.transformer.patch_size = num(key, value)?,
            "embed_dim" => m.transformer.embed_dim = num(key, value)?,
            "depth" => m.transformer.depth = num(key, value)?,
            "heads" => m.transformer.heads = num(key, value)?,
            "mlp_ratio" => m.transformer.mlp_ratio = num(key, value)?,
            "fusion_mode" => m.fusion.mode = value.parse::<FusionMode>()?,
            "se_reduction" => m.fusion.se_reduction = num(key, value)?,
            "interaction_dims" => m.fusion.interaction_dims = list(key, value)?,
            "alpha" => m.loss.weights.alpha = num(key, value)?,
            "beta" => m.loss.weights.beta = num(key, value)?,
            "gamma" => m.loss.weights.gamma = num(key, value)?,
            "boundary_kernel" => m.loss.boundary_kernel = num(key, value)?,
            "boundary_lambda" => m.loss.boundary_lambda = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "lr_final" => self.lr_final = num(key, value)?,
            "lr_schedule" => {
                self.schedule = match value {
                    "linear" => LrSchedule::Linear,
                    "constant" => LrSchedule::Constant,
                    _ => {
                        return Err(Error::config(format!(
                            "lr_schedule must be linear or constant, got {value:?}"
                        )))
                    }
                }
            }
            "clip_norm" => {
                let c: f64 = num(key, value)?;
                self.clip_norm = (c > 0.0).then_some(c);
            }
            "data" => {
                self.data = match value {
                    "synthetic" => DataSource::Synthetic { n: 8 },
                    "isic" => DataSource::Isic {
                        images: PathBuf::new(),
                        masks: PathBuf::new(),
                    },
                    "manifest" => DataSource::Manifest(PathBuf::new()),
                    _ => {
                        return Err(Error::config(format!(
                            "data must be synthetic, isic or manifest, got {value:?}"
                        )))
                    }
                }
            }
            "synthetic_n" => {
                self.data = DataSource::Synthetic {
                    n: num(key, value)?,
                }
            }
            "images_dir" | "masks_dir" => {
                let (mut images, mut masks) = match &self.data {
                    DataSource::Isic { images, masks } => (images.clone(), masks.clone()),
                    _ => (PathBuf::new(), PathBuf::new()),
                };
                if key == "images_dir" {
                    images = value.into();
                } else {
                    masks = value.into();
                }
                self.data = DataSource::Isic { images, masks };
            }
            "manifest" => self.data = DataSource::Manifest(value.into()),
            "val_fraction" => self.val_fraction = num(key, value)?,
            "eval_interval" => self.eval_interval = num(key, value)?,
            "threshold" => self.threshold = num(key, value)?,
            "checkpoint" => self.checkpoint = (!value.is_empty()).then(|| value.into()),
            "augment" => match value {
                "true" | "on" | "1" => {
                    self.augment.get_or_insert_with(AugmentConfig::default);
                }
                "false" | "off" | "0" => self.augment = None,
                _ => {
                    return Err(Error::config(format!(
                        "augment must be true or false, got {value:?}"
                    )))
                }
            },
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Every setting as `key = value` lines.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let join = |xs: &[usize]| {
            xs.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("preset", m.preset.to_string());
        kv("image_height", m.image_size.0.to_string());
        kv("image_width", m.image_size.1.to_string());
        kv("cnn_stem_channels", m.cnn.stem_channels.to_string());
        kv("cnn_channels", join(&m.cnn.block_channels));
        kv("cnn_blocks", join(&m.cnn.blocks_per_stage));
        kv("patch_size", m.transformer.patch_size.to_string());
        kv("embed_dim", m.transformer.embed_dim.to_string());
        kv("depth", m.transformer.depth.to_string());
        kv("heads", m.transformer.heads.to_string());
        kv("mlp_ratio", m.transformer.mlp_ratio.to_string());
        kv("fusion_mode", m.fusion.mode.to_string());
        kv("se_reduction", m.fusion.se_reduction.to_string());
        kv("interaction_dims", join(&m.fusion.interaction_dims));
        kv("alpha", m.loss.weights.alpha.to_string());
        kv("beta", m.loss.weights.beta.to_string());
        kv("gamma", m.loss.weights.gamma.to_string());
        kv("boundary_kernel", m.loss.boundary_kernel.to_string());
        kv("boundary_lambda", m.loss.boundary_lambda.to_string());
        kv("seed", self.seed.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("lr_final", self.lr_final.to_string());
        kv(
            "lr_schedule",
            match self.schedule {
                LrSchedule::Linear => "linear".into(),
                LrSchedule::Constant => "constant".into(),
            },
        );
        kv("clip_norm", self.clip_norm.unwrap_or(0.0).to_string());
        match &self.data {
            DataSource::Synthetic { n } => kv("synthetic_n", n.to_string()),
            DataSource::Isic { images, masks } => {
                kv("images_dir", images.display().to_string());
                kv("masks_dir", masks.display().to_string());
            }
            DataSource::Manifest(p) => kv("manifest", p.display().to_string()),
        }
        kv("val_fraction", self.val_fraction.to_string());
        kv("eval_interval", self.eval_interval.to_string());
        kv("threshold", self.threshold.to_string());
        kv(
            "checkpoint",
            self.checkpoint
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        match &self.augment {
            None => kv("augment", "false".into()),
            Some(a) => {
                kv("augment", "true".into());
                kv("aug_shift_limit", a.shift_limit.to_string());
                kv("aug_scale_limit", a.scale_limit.to_string());
                kv("aug_rotate_limit", a.rotate_limit.to_string());
                kv("aug_p_affine", a.p_affine.to_string());
                kv("aug_brightness", a.brightness.to_string());
                kv("aug_contrast", a.contrast.to_string());
                kv("aug_saturation", a.saturation.to_string());
                kv("aug_hue", a.hue.to_string());
                kv("aug_p_jitter", a.p_jitter.to_string());
                kv("aug_p_hflip", a.p_hflip.to_string());
                kv("aug_p_vflip", a.p_vflip.to_string());
                kv("aug_seed", a.seed.to_string());
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        for mut cfg in [TrainConfig::toy(), TrainConfig::large()] {
            cfg.lr = 0.1 + 0.2;
            cfg.checkpoint = Some("runs/a.ckpt".into());
            assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        }
        let mut isic = TrainConfig::toy();
        isic.data = DataSource::Isic {
            images: "i".into(),
            masks: "m".into(),
        };
        assert_eq!(TrainConfig::parse(&isic.to_text()).unwrap(), isic);
    }

    #[test]
    fn preset_applies_first_and_comments_are_ignored() {
        let cfg = TrainConfig::parse(
            "epochs = 3 # short\n\n# full size\npreset = large\nfusion_mode = concat-res\n",
        )
        .unwrap();
        assert_eq!(cfg.model.preset, Preset::Large);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 16);
        assert_eq!(cfg.model.fusion.mode, FusionMode::ConcatRes);
    }

    #[test]
    fn errors() {
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("epochs = many").is_err());
        assert!(TrainConfig::parse("epochs 3").is_err());
        assert!(TrainConfig::parse("epochs = 0").is_err());
        assert!(TrainConfig::parse("lr = -1").is_err());
    }

    #[test]
    fn linear_schedule_endpoints() {
        let cfg = TrainConfig::large();
        assert_eq!(cfg.lr_at(0), 1e-4);
        assert!((cfg.lr_at(29) - 7e-5).abs() < 1e-18);
        assert!(cfg.lr_at(10) < 1e-4 && cfg.lr_at(10) > 7e-5);
    }
}

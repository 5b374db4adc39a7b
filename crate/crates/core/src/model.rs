//! The full dual-branch segmentation network.

use std::fmt;
use std::str::FromStr;

use crate::cnn::{CnnBranch, CnnConfig, CnnFeatures};
use crate::error::{Error, Result};
use crate::fusion::{FusedFeatures, FusionConfig, FusionMode, FusionModule};
use crate::loss::LossConfig;
use crate::nn::{Ctx, Init, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{Graph, Tensor, Var};
use crate::transformer::{TransformerBranch, TransformerConfig, TransformerFeatures};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Toy,
    Large,
}

impl Preset {
    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Large => "large",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "toy" => Ok(Preset::Toy),
            "large" => Ok(Preset::Large),
            other => Err(Error::config(format!(
                "unknown preset {other:?} (expected toy or large)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub preset: Preset,
    /// Network input as (height, width).
    pub image_size: (usize, usize),
    pub cnn: CnnConfig,
    pub transformer: TransformerConfig,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
}

impl ModelConfig {
    /// Small widths on 64×64 inputs, sized for CPU training in minutes.
    pub fn toy() -> Self {
        let cnn = CnnConfig::toy();
        let fusion = FusionConfig::for_widths(cnn.feature_channels(), FusionMode::Full);
        Self {
            preset: Preset::Toy,
            image_size: (64, 64),
            cnn,
            transformer: TransformerConfig::toy(),
            fusion,
            loss: LossConfig::toy(),
        }
    }

    /// ResNet-34 / DeiT-S widths on 192×256 inputs.
    pub fn large() -> Self {
        let cnn = CnnConfig::large();
        let fusion = FusionConfig::for_widths(cnn.feature_channels(), FusionMode::Full);
        Self {
            preset: Preset::Large,
            image_size: (192, 256),
            cnn,
            transformer: TransformerConfig::large(),
            fusion,
            loss: LossConfig::large(),
        }
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Toy => Self::toy(),
            Preset::Large => Self::large(),
        }
    }

    pub fn with_fusion_mode(mut self, mode: FusionMode) -> Self {
        self.fusion.mode = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::config(format!(
                "image size {h}x{w} must be a positive multiple of 16"
            )));
        }
        self.cnn.validate()?;
        self.transformer.validate()?;
        self.fusion.validate(self.cnn.feature_channels())?;
        self.loss.validate()
    }
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub cnn: CnnFeatures,
    pub transformer: TransformerFeatures,
    pub fused: FusedFeatures,
}

impl ModelOutput {
    /// Head probability maps in order (fused, transformer, coarse).
    pub fn heads(&self) -> [Var; 3] {
        self.fused.heads
    }

    /// The primary prediction, from the fully decoded feature.
    pub fn prediction(&self) -> Var {
        self.fused.heads[0]
    }
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: ModelConfig,
    pub cnn: CnnBranch,
    pub transformer: TransformerBranch,
    pub fusion: FusionModule,
}

impl SegModel {
    /// Builds the network and its freshly initialized parameters.
    pub fn new(config: &ModelConfig, rng: &mut RngStream) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut ps = ParamStore::new();
        let widths = config.cnn.feature_channels();
        let mut init = Init::new(&mut ps, rng);
        let cnn = CnnBranch::new(&mut init.sub("cnn"), &config.cnn);
        let transformer = TransformerBranch::new(
            &mut init.sub("transformer"),
            &config.transformer,
            config.image_size,
            widths,
        );
        let fusion = FusionModule::new(&mut init.sub("fusion"), &config.fusion, widths);
        Ok((
            Self {
                config: config.clone(),
                cnn,
                transformer,
                fusion,
            },
            ps,
        ))
    }

    pub fn forward(&self, cx: &mut Ctx, image: Var) -> Result<ModelOutput> {
        let s = cx.g.shape(image).to_vec();
        if s.len() != 4 || s[1] != 3 || (s[2], s[3]) != self.config.image_size {
            return Err(Error::dim(format!(
                "model expects [B,3,{},{}] input, got {:?}",
                self.config.image_size.0, self.config.image_size.1, s
            )));
        }
        let cnn = self.cnn.forward(cx, image)?;
        let transformer = self.transformer.forward(cx, image)?;
        let fused = self.fusion.forward(
            cx,
            [transformer.t0, transformer.t1, transformer.t2],
            [cnn.g0, cnn.g1, cnn.g2],
            self.config.image_size,
        )?;
        Ok(ModelOutput {
            cnn,
            transformer,
            fused,
        })
    }

    /// Eval-mode probability map `[B, 1, H, W]` for a batch of images.
    pub fn predict(&self, ps: &ParamStore, images: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(images);
        let out = self.forward(&mut Ctx::new(&mut g, ps, false), x)?;
        Ok(g.to_tensor(out.prediction()))
    }
}

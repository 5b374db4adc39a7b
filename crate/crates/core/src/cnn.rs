//! ResNet-style CNN branch producing spatial features at /16, /8 and /4.
//!
//! Layout: a 7×7 stride-2 stem with 3×3 stride-2 max pooling (/4), then four
//! stages of basic residual blocks with strides 1, 1, 2, 2. Stage outputs 2, 3
//! and 4 are the fusion inputs `g2` (/4), `g1` (/8) and `g0` (/16); there is
//! no /32 stage and no classifier head.

use crate::error::{Error, Result};
use crate::nn::{ConvBn, Ctx, Init};
use crate::tensor::Var;

pub const STAGE_STRIDES: [usize; 4] = [1, 1, 2, 2];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CnnConfig {
    pub stem_channels: usize,
    pub block_channels: [usize; 4],
    pub blocks_per_stage: [usize; 4],
}

impl CnnConfig {
    /// ResNet-34 widths and depths.
    pub fn large() -> Self {
        Self {
            stem_channels: 64,
            block_channels: [64, 128, 256, 512],
            blocks_per_stage: [3, 4, 6, 3],
        }
    }

    pub fn toy() -> Self {
        Self {
            stem_channels: 8,
            block_channels: [8, 16, 32, 64],
            blocks_per_stage: [1, 1, 1, 1],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stem_channels == 0
            || self.block_channels.contains(&0)
            || self.blocks_per_stage.contains(&0)
        {
            return Err(Error::config(
                "CNN channel counts and depths must be positive",
            ));
        }
        Ok(())
    }

    /// Channel widths of (g0, g1, g2).
    pub fn feature_channels(&self) -> [usize; 3] {
        [
            self.block_channels[3],
            self.block_channels[2],
            self.block_channels[1],
        ]
    }
}

/// Two 3×3 conv+BN layers with an identity or 1×1 projection shortcut.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Option<ConvBn>,
}

impl BasicBlock {
    pub fn new(init: &mut Init, cin: usize, cout: usize, stride: usize) -> Self {
        let shortcut = (cin != cout || stride != 1)
            .then(|| ConvBn::new(&mut init.sub("shortcut"), cin, cout, 1, stride, false));
        Self {
            conv1: ConvBn::new(&mut init.sub("conv1"), cin, cout, 3, stride, true),
            conv2: ConvBn::new(&mut init.sub("conv2"), cout, cout, 3, 1, false),
            shortcut,
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.conv1.forward(cx, x)?;
        let h = self.conv2.forward(cx, h)?;
        let skip = match &self.shortcut {
            Some(proj) => proj.forward(cx, x)?,
            None => x,
        };
        let y = cx.g.add(h, skip)?;
        Ok(cx.g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct CnnFeatures {
    /// `[B, c4, H/16, W/16]`
    pub g0: Var,
    /// `[B, c3, H/8, W/8]`
    pub g1: Var,
    /// `[B, c2, H/4, W/4]`
    pub g2: Var,
}

impl CnnFeatures {
    /// `[g0, g1, g2]`, coarsest first.
    pub fn features(&self) -> [Var; 3] {
        [self.g0, self.g1, self.g2]
    }
}

#[derive(Clone, Debug)]
pub struct CnnBranch {
    pub stem: ConvBn,
    pub stages: Vec<Vec<BasicBlock>>,
}

impl CnnBranch {
    pub fn new(init: &mut Init, cfg: &CnnConfig) -> Self {
        let stem = ConvBn::new(&mut init.sub("stem"), 3, cfg.stem_channels, 7, 2, true);
        let mut cin = cfg.stem_channels;
        let mut stages = Vec::new();
        for (s, (&width, &depth)) in cfg
            .block_channels
            .iter()
            .zip(&cfg.blocks_per_stage)
            .enumerate()
        {
            let mut stage_init = init.sub(&format!("stage{}", s + 1));
            let blocks = (0..depth)
                .map(|b| {
                    let stride = if b == 0 { STAGE_STRIDES[s] } else { 1 };
                    let block = BasicBlock::new(
                        &mut stage_init.sub(&format!("block{b}")),
                        cin,
                        width,
                        stride,
                    );
                    cin = width;
                    block
                })
                .collect();
            stages.push(blocks);
        }
        Self { stem, stages }
    }

    pub fn forward(&self, cx: &mut Ctx, image: Var) -> Result<CnnFeatures> {
        let shape = crate::nn::expect_rank(cx.g, image, 4, "cnn_forward")?;
        if shape[2] % 16 != 0 || shape[3] % 16 != 0 {
            return Err(Error::config(format!(
                "input height and width must be divisible by 16, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let x = self.stem.forward(cx, image)?;
        let mut x = cx.g.max_pool2d(x, 3, 2, 1)?;
        let mut outs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(cx, x)?;
            }
            outs.push(x);
        }
        Ok(CnnFeatures {
            g0: outs[3],
            g1: outs[2],
            g2: outs[1],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::RngStream;
    use crate::tensor::{Graph, Tensor};

    fn build(cfg: &CnnConfig) -> (ParamStore, CnnBranch) {
        let mut ps = ParamStore::new();
        let mut rng = RngStream::from_seed(7);
        let net = CnnBranch::new(&mut Init::new(&mut ps, &mut rng), cfg);
        (ps, net)
    }

    #[test]
    fn toy_shapes_on_32x32() {
        let (ps, net) = build(&CnnConfig::toy());
        let mut g = Graph::new();
        let mut rng = RngStream::from_seed(1);
        let x = g.constant(&Tensor::randn(&[1, 3, 32, 32], 1.0, &mut rng));
        let f = net.forward(&mut Ctx::new(&mut g, &ps, true), x).unwrap();
        assert_eq!(g.shape(f.g0), &[1, 64, 2, 2]);
        assert_eq!(g.shape(f.g1), &[1, 32, 4, 4]);
        assert_eq!(g.shape(f.g2), &[1, 16, 8, 8]);
    }

    #[test]
    fn large_input_size_grids() {
        let (ps, net) = build(&CnnConfig::toy());
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[1, 3, 192, 256]));
        let f = net.forward(&mut Ctx::new(&mut g, &ps, false), x).unwrap();
        assert_eq!(&g.shape(f.g0)[2..], &[12, 16]);
        assert_eq!(&g.shape(f.g1)[2..], &[24, 32]);
        assert_eq!(&g.shape(f.g2)[2..], &[48, 64]);
        // zero input, no biases, identity running stats, zero beta
        for v in [f.g0, f.g1, f.g2] {
            assert!(g.value(v).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn indivisible_input_is_a_config_error() {
        let (ps, net) = build(&CnnConfig::toy());
        let mut g = Graph::new();
        let x = g.constant(&Tensor::zeros(&[1, 3, 40, 32]));
        let err = net
            .forward(&mut Ctx::new(&mut g, &ps, false), x)
            .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn zero_weight_block_is_identity() {
        let mut ps = ParamStore::new();
        let mut rng = RngStream::from_seed(2);
        let block = BasicBlock::new(&mut Init::new(&mut ps, &mut rng), 4, 4, 1);
        for p in ps.params_mut() {
            if p.name.ends_with("conv.weight") {
                p.tensor.data_mut().fill(0.0);
            }
        }
        let input = Tensor::uniform(&[2, 4, 5, 5], 0.0, 2.0, &mut rng);
        for training in [true, false] {
            let mut g = Graph::new();
            let x = g.constant(&input);
            let y = block
                .forward(&mut Ctx::new(&mut g, &ps, training), x)
                .unwrap();
            assert_eq!(g.value(y), input.data());
        }
    }

    #[test]
    fn large_preset_matches_resnet34() {
        let cfg = CnnConfig::large();
        assert_eq!(cfg.block_channels, [64, 128, 256, 512]);
        assert_eq!(cfg.blocks_per_stage, [3, 4, 6, 3]);
        let toy = CnnConfig::toy();
        assert!(toy
            .block_channels
            .iter()
            .zip(&cfg.block_channels)
            .all(|(a, b)| a < b));
        assert_eq!(cfg.feature_channels(), [512, 256, 128]);
    }
}

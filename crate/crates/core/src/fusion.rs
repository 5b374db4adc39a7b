//! Cross-branch fusion at three scales, the attention-gated decoder and the
//! segmentation heads.
//!
//! At scale `i` the fused feature is
//! `f = Res([b̂, t̂, ĝ])` with `t̂ = SE(t)`, `ĝ = SA(g)` and
//! `b̂ = CBR3×3(W₁t ⊙ W₂g)`. The reduced modes drop parts of that in the
//! order of the ablation lattice. Decoding runs coarse to fine:
//! `f̂⁰ = f⁰`, `f̂ⁱ⁺¹ = CBR3×3([Up(f̂ⁱ), AG(fⁱ⁺¹, Up(f̂ⁱ))])`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{expect_rank, Conv2d, ConvBn, Ctx, Init, Linear};
use crate::tensor::Var;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    /// `Res([t, g])`
    ConcatRes,
    /// `Res([t, SA(g)])`
    ConcatResSpatial,
    /// `Res([SE(t), SA(g)])`
    ConcatResChannel,
    /// `Res([b̂, SE(t), SA(g)])`
    Full,
}

impl FusionMode {
    pub const ALL: [FusionMode; 4] = [
        FusionMode::ConcatRes,
        FusionMode::ConcatResSpatial,
        FusionMode::ConcatResChannel,
        FusionMode::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FusionMode::ConcatRes => "concat-res",
            FusionMode::ConcatResSpatial => "concat-res-spatial",
            FusionMode::ConcatResChannel => "concat-res-channel",
            FusionMode::Full => "full",
        }
    }

    pub fn spatial(self) -> bool {
        self != FusionMode::ConcatRes
    }

    pub fn channel(self) -> bool {
        matches!(self, FusionMode::ConcatResChannel | FusionMode::Full)
    }

    pub fn product(self) -> bool {
        self == FusionMode::Full
    }
}

impl fmt::Display for FusionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        FusionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown fusion mode {s:?} (expected concat-res, concat-res-spatial, concat-res-channel or full)"
                ))
            })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub se_reduction: usize,
    /// Width of the Hadamard interaction at (/16, /8, /4).
    pub interaction_dims: [usize; 3],
}

impl FusionConfig {
    /// Interaction widths equal to the CNN widths, `r = 4`.
    pub fn for_widths(widths: [usize; 3], mode: FusionMode) -> Self {
        Self {
            mode,
            se_reduction: 4,
            interaction_dims: widths,
        }
    }

    pub fn validate(&self, widths: [usize; 3]) -> Result<()> {
        if self.interaction_dims.contains(&0) {
            return Err(Error::config("interaction widths must be positive"));
        }
        if self.se_reduction == 0
            || widths
                .iter()
                .any(|c| c % self.se_reduction != 0 || c / self.se_reduction == 0)
        {
            return Err(Error::config(format!(
                "se_reduction {} must divide every branch width {:?}",
                self.se_reduction, widths
            )));
        }
        Ok(())
    }
}

/// Squeeze-and-excitation: `s = σ(W₂ relu(W₁ GAP(t)))`, output `t ⊙ s`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl ChannelAttention {
    pub fn new(init: &mut Init, channels: usize, reduction: usize) -> Self {
        let hidden = (channels / reduction).max(1);
        Self {
            fc1: Linear::new(&mut init.sub("fc1"), channels, hidden, true),
            fc2: Linear::new(&mut init.sub("fc2"), hidden, channels, true),
        }
    }

    /// Returns the output and the gate `s` as `[B, C, 1, 1]`.
    pub fn forward_with_map(&self, cx: &mut Ctx, t: Var) -> Result<(Var, Var)> {
        let s = expect_rank(cx.g, t, 4, "channel_attention")?;
        let z = cx.g.global_avg_pool(t)?;
        let z = self.fc1.forward(cx, z)?;
        let z = cx.g.relu(z);
        let z = self.fc2.forward(cx, z)?;
        let gate = cx.g.sigmoid(z);
        let gate = cx.g.reshape(gate, &[s[0], s[1], 1, 1])?;
        Ok((cx.g.mul(t, gate)?, gate))
    }
}

/// `m = σ(conv1×1([max_c g; mean_c g]))`, output `g ⊙ m`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub conv: Conv2d,
}

impl SpatialAttention {
    pub fn new(init: &mut Init) -> Self {
        Self {
            conv: Conv2d::new(&mut init.sub("conv"), 2, 1, 1, 1, 0, true),
        }
    }

    /// Returns the output and the map `m` as `[B, 1, H, W]`.
    pub fn forward_with_map(&self, cx: &mut Ctx, g: Var) -> Result<(Var, Var)> {
        expect_rank(cx.g, g, 4, "spatial_attention")?;
        let mx = cx.g.max_axis(g, 1)?;
        let mean = cx.g.mean_axis(g, 1)?;
        let pooled = cx.g.concat_channels(&[mx, mean])?;
        let logits = self.conv.forward(cx, pooled)?;
        let m = cx.g.sigmoid(logits);
        Ok((cx.g.mul(g, m)?, m))
    }
}

/// `relu(CB3×3(CBR3×3(x)) + conv1×1(x))`.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub conv1: ConvBn,
    pub conv2: ConvBn,
    pub shortcut: Conv2d,
}

impl ResidualBlock {
    pub fn new(init: &mut Init, cin: usize, cout: usize) -> Self {
        Self {
            conv1: ConvBn::new(&mut init.sub("conv1"), cin, cout, 3, 1, true),
            conv2: ConvBn::new(&mut init.sub("conv2"), cout, cout, 3, 1, false),
            shortcut: Conv2d::new(&mut init.sub("shortcut"), cin, cout, 1, 1, 0, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.conv1.forward(cx, x)?;
        let h = self.conv2.forward(cx, h)?;
        let s = self.shortcut.forward(cx, x)?;
        let y = cx.g.add(h, s)?;
        Ok(cx.g.relu(y))
    }
}

#[derive(Clone, Debug)]
pub struct BiFuseOutput {
    pub f: Var,
    pub channel_gate: Option<Var>,
    pub spatial_map: Option<Var>,
}

/// Fusion block for one scale.
#[derive(Clone, Debug)]
pub struct BiFusion {
    pub mode: FusionMode,
    pub channel: Option<ChannelAttention>,
    pub spatial: Option<SpatialAttention>,
    pub w1: Option<Conv2d>,
    pub w2: Option<Conv2d>,
    pub interact: Option<ConvBn>,
    pub residual: ResidualBlock,
}

impl BiFusion {
    /// `ct`, `cg`: transformer and CNN widths; `li`: interaction width;
    /// `cout`: fused width.
    pub fn new(
        init: &mut Init,
        mode: FusionMode,
        ct: usize,
        cg: usize,
        li: usize,
        cout: usize,
        reduction: usize,
    ) -> Self {
        let channel = mode
            .channel()
            .then(|| ChannelAttention::new(&mut init.sub("channel_attn"), ct, reduction));
        let spatial = mode
            .spatial()
            .then(|| SpatialAttention::new(&mut init.sub("spatial_attn")));
        let (w1, w2, interact) = if mode.product() {
            (
                Some(Conv2d::new(&mut init.sub("w1"), ct, li, 1, 1, 0, false)),
                Some(Conv2d::new(&mut init.sub("w2"), cg, li, 1, 1, 0, false)),
                Some(ConvBn::new(&mut init.sub("interact"), li, li, 3, 1, true)),
            )
        } else {
            (None, None, None)
        };
        let cin = ct + cg + if mode.product() { li } else { 0 };
        Self {
            mode,
            channel,
            spatial,
            w1,
            w2,
            interact,
            residual: ResidualBlock::new(&mut init.sub("residual"), cin, cout),
        }
    }

    pub fn forward_detailed(&self, cx: &mut Ctx, t: Var, g: Var) -> Result<BiFuseOutput> {
        let st = expect_rank(cx.g, t, 4, "bifuse")?;
        let sg = expect_rank(cx.g, g, 4, "bifuse")?;
        if st[0] != sg[0] || st[2..] != sg[2..] {
            return Err(Error::dim(format!(
                "transformer feature {:?} and CNN feature {:?} disagree in batch or spatial size",
                st, sg
            )));
        }
        let (t_hat, channel_gate) = match &self.channel {
            Some(se) => {
                let (y, s) = se.forward_with_map(cx, t)?;
                (y, Some(s))
            }
            None => (t, None),
        };
        let (g_hat, spatial_map) = match &self.spatial {
            Some(sa) => {
                let (y, m) = sa.forward_with_map(cx, g)?;
                (y, Some(m))
            }
            None => (g, None),
        };
        let mut parts = Vec::with_capacity(3);
        if let (Some(w1), Some(w2), Some(interact)) = (&self.w1, &self.w2, &self.interact) {
            let a = w1.forward(cx, t)?;
            let b = w2.forward(cx, g)?;
            let prod = cx.g.hadamard(a, b)?;
            parts.push(interact.forward(cx, prod)?);
        }
        parts.push(t_hat);
        parts.push(g_hat);
        let cat = cx.g.concat_channels(&parts)?;
        Ok(BiFuseOutput {
            f: self.residual.forward(cx, cat)?,
            channel_gate,
            spatial_map,
        })
    }

    pub fn forward(&self, cx: &mut Ctx, t: Var, g: Var) -> Result<Var> {
        self.forward_detailed(cx, t, g).map(|o| o.f)
    }
}

/// Additive attention gate:
/// `ψ = σ(conv1×1(relu(conv1×1(x) + conv1×1(gate))))`, output `x ⊙ ψ`.
#[derive(Clone, Debug)]
pub struct AttentionGate {
    pub wx: Conv2d,
    pub wg: Conv2d,
    pub psi: Conv2d,
}

impl AttentionGate {
    pub fn new(init: &mut Init, cx_channels: usize, cg_channels: usize) -> Self {
        let inter = (cx_channels / 2).max(1);
        Self {
            wx: Conv2d::new(&mut init.sub("wx"), cx_channels, inter, 1, 1, 0, true),
            wg: Conv2d::new(&mut init.sub("wg"), cg_channels, inter, 1, 1, 0, true),
            psi: Conv2d::new(&mut init.sub("psi"), inter, 1, 1, 1, 0, true),
        }
    }

    pub fn forward_with_map(&self, cx: &mut Ctx, x: Var, gate: Var) -> Result<(Var, Var)> {
        let sx = expect_rank(cx.g, x, 4, "attention_gate")?;
        let sg = expect_rank(cx.g, gate, 4, "attention_gate")?;
        if sx[0] != sg[0] || sx[2..] != sg[2..] {
            return Err(Error::dim(format!(
                "gate {:?} must match the gated feature {:?} in batch and spatial size",
                sg, sx
            )));
        }
        let a = self.wx.forward(cx, x)?;
        let b = self.wg.forward(cx, gate)?;
        let h = cx.g.add(a, b)?;
        let h = cx.g.relu(h);
        let logits = self.psi.forward(cx, h)?;
        let psi = cx.g.sigmoid(logits);
        Ok((cx.g.mul(x, psi)?, psi))
    }
}

/// 1×1 conv to one channel, bilinear resize to the image size, sigmoid.
#[derive(Clone, Debug)]
pub struct Head {
    pub conv: Conv2d,
}

impl Head {
    pub fn new(init: &mut Init, channels: usize) -> Self {
        Self {
            conv: Conv2d::new(&mut init.sub("conv"), channels, 1, 1, 1, 0, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var, out_hw: (usize, usize)) -> Result<Var> {
        let logits = self.conv.forward(cx, x)?;
        let logits = cx.g.resize_bilinear(logits, out_hw.0, out_hw.1)?;
        Ok(cx.g.sigmoid(logits))
    }
}

#[derive(Clone, Debug)]
pub struct FusedFeatures {
    pub f0: Var,
    pub f1: Var,
    pub f2: Var,
    pub fhat1: Var,
    pub fhat2: Var,
    /// Probability maps `[B, 1, H, W]` from `f̂²`, `t²` and `f⁰`.
    pub heads: [Var; 3],
    pub gate_maps: [Var; 2],
    pub channel_gates: Vec<Var>,
    pub spatial_maps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FusionDecoder {
    pub gates: [AttentionGate; 2],
    pub merges: [ConvBn; 2],
}

impl FusionDecoder {
    /// `widths` are the fused widths at (/16, /8, /4).
    pub fn new(init: &mut Init, widths: [usize; 3]) -> Self {
        let [c0, c1, c2] = widths;
        Self {
            gates: [
                AttentionGate::new(&mut init.sub("gate1"), c1, c0),
                AttentionGate::new(&mut init.sub("gate2"), c2, c1),
            ],
            merges: [
                ConvBn::new(&mut init.sub("merge1"), c0 + c1, c1, 3, 1, true),
                ConvBn::new(&mut init.sub("merge2"), c1 + c2, c2, 3, 1, true),
            ],
        }
    }

    /// Returns `(f̂¹, f̂², gate maps)`.
    pub fn forward(&self, cx: &mut Ctx, f: [Var; 3]) -> Result<(Var, Var, [Var; 2])> {
        let mut fhat = f[0];
        let mut out = [fhat; 2];
        let mut maps = [fhat; 2];
        for i in 0..2 {
            let up = cx.g.bilinear_upsample2x(fhat)?;
            let (gated, psi) = self.gates[i].forward_with_map(cx, f[i + 1], up)?;
            let cat = cx.g.concat_channels(&[up, gated])?;
            fhat = self.merges[i].forward(cx, cat)?;
            out[i] = fhat;
            maps[i] = psi;
        }
        Ok((out[0], out[1], maps))
    }
}

#[derive(Clone, Debug)]
pub struct FusionModule {
    pub config: FusionConfig,
    pub scales: [BiFusion; 3],
    pub decoder: FusionDecoder,
    /// Heads on `f̂²`, `t²` and `f⁰`.
    pub heads: [Head; 3],
}

impl FusionModule {
    /// `widths` are the shared branch widths at (/16, /8, /4).
    pub fn new(init: &mut Init, cfg: &FusionConfig, widths: [usize; 3]) -> Self {
        let mk = |init: &mut Init, i: usize| {
            BiFusion::new(
                &mut init.sub(&format!("scale{i}")),
                cfg.mode,
                widths[i],
                widths[i],
                cfg.interaction_dims[i],
                widths[i],
                cfg.se_reduction,
            )
        };
        let scales = [mk(init, 0), mk(init, 1), mk(init, 2)];
        let decoder = FusionDecoder::new(&mut init.sub("decoder"), widths);
        let heads = [
            Head::new(&mut init.sub("head_fused"), widths[2]),
            Head::new(&mut init.sub("head_transformer"), widths[2]),
            Head::new(&mut init.sub("head_coarse"), widths[0]),
        ];
        Self {
            config: cfg.clone(),
            scales,
            decoder,
            heads,
        }
    }

    /// `t` and `g` are ordered (/16, /8, /4).
    pub fn forward(
        &self,
        cx: &mut Ctx,
        t: [Var; 3],
        g: [Var; 3],
        out_hw: (usize, usize),
    ) -> Result<FusedFeatures> {
        let mut f = [t[0]; 3];
        let mut channel_gates = Vec::new();
        let mut spatial_maps = Vec::new();
        for i in 0..3 {
            let o = self.scales[i].forward_detailed(cx, t[i], g[i])?;
            f[i] = o.f;
            channel_gates.extend(o.channel_gate);
            spatial_maps.extend(o.spatial_map);
        }
        let (fhat1, fhat2, gate_maps) = self.decoder.forward(cx, f)?;
        let heads = [
            self.heads[0].forward(cx, fhat2, out_hw)?,
            self.heads[1].forward(cx, t[2], out_hw)?,
            self.heads[2].forward(cx, f[0], out_hw)?,
        ];
        Ok(FusedFeatures {
            f0: f[0],
            f1: f[1],
            f2: f[2],
            fhat1,
            fhat2,
            heads,
            gate_maps,
            channel_gates,
            spatial_maps,
        })
    }
}

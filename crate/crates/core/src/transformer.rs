//! ViT-style transformer branch: patch embedding, pre-norm encoder and a
//! progressive-upsampling (PUP) decoder emitting features at /16, /8, /4.

use crate::error::{Error, Result};
use crate::nn::{expect_rank, Conv2d, ConvBn, Ctx, Init, LayerNorm, Linear, ParamId};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
}

impl TransformerConfig {
    /// DeiT-Small widths with the 8-layer depth used for this model.
    pub fn large() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 384,
            depth: 8,
            heads: 6,
            mlp_ratio: 4.0,
        }
    }

    pub fn toy() -> Self {
        Self {
            patch_size: 16,
            embed_dim: 64,
            depth: 2,
            heads: 4,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.patch_size != 16 {
            return Err(Error::config(
                "the PUP decoder expects a 16-pixel patch grid",
            ));
        }
        if !self.embed_dim.is_multiple_of(4) {
            return Err(Error::config(
                "embed_dim must be divisible by 4 for the PUP channel schedule",
            ));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::config("mlp_ratio must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Tokens `[B, N, D]` laid out over a `(rows, cols)` patch grid.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub grid: (usize, usize),
}

/// Scaled dot-product attention `softmax(Q·Kᵀ/√d)·V`, also returning the
/// attention weights.
pub fn attention_with_weights(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let (sq, sk, sv) = (
        g.shape(q).to_vec(),
        g.shape(k).to_vec(),
        g.shape(v).to_vec(),
    );
    let d = *sq
        .last()
        .ok_or_else(|| Error::dim("attention needs rank >= 2"))?;
    if sk.last() != Some(&d) {
        return Err(Error::dim(format!(
            "query head dim {d} does not match key shape {:?}",
            sk
        )));
    }
    if sk.len() < 2 || sv.len() < 2 || sk[sk.len() - 2] != sv[sv.len() - 2] {
        return Err(Error::dim(format!(
            "keys {:?} and values {:?} must hold the same number of rows",
            sk, sv
        )));
    }
    let kt = g.transpose_last(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax_last_dim(scores)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

pub fn attention(g: &mut Graph, q: Var, k: Var, v: Var) -> Result<Var> {
    attention_with_weights(g, q, k, v).map(|(o, _)| o)
}

/// Multi-head self-attention: per-head `Q = X·W_Q`, `K = X·W_K`, `V = X·W_V`,
/// heads concatenated and projected back to `D`.
#[derive(Clone, Debug)]
pub struct Msa {
    pub heads: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub proj: Linear,
}

impl Msa {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Self {
        let std = (1.0 / dim as f64).sqrt();
        let mut mk = |name: &str| {
            let t = Tensor::randn(&[dim, dim], std, init.rng);
            init.param(name, t)
        };
        let (w_q, w_k, w_v) = (mk("w_q"), mk("w_k"), mk("w_v"));
        Self {
            heads,
            w_q,
            w_k,
            w_v,
            proj: Linear::new(&mut init.sub("proj"), dim, dim, true),
        }
    }

    fn split_heads(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let &[b, n, d] = g.shape(x) else {
            unreachable!()
        };
        let x = g.reshape(x, &[b, n, self.heads, d / self.heads])?;
        g.permute(x, &[0, 2, 1, 3])
    }

    /// Returns the output `[B, N, D]` and the attention weights `[B, h, N, N]`.
    pub fn forward_with_weights(&self, cx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let s = expect_rank(cx.g, x, 3, "msa")?;
        let (b, n, d) = (s[0], s[1], s[2]);
        if d % self.heads != 0 {
            return Err(Error::dim(format!(
                "width {d} is not divisible into {} heads",
                self.heads
            )));
        }
        let wq = cx.p(self.w_q);
        let wk = cx.p(self.w_k);
        let wv = cx.p(self.w_v);
        let q = cx.g.matmul(x, wq)?;
        let k = cx.g.matmul(x, wk)?;
        let v = cx.g.matmul(x, wv)?;
        let q = self.split_heads(cx.g, q)?;
        let k = self.split_heads(cx.g, k)?;
        let v = self.split_heads(cx.g, v)?;
        let (heads, weights) = attention_with_weights(cx.g, q, k, v)?;
        let merged = cx.g.permute(heads, &[0, 2, 1, 3])?;
        let merged = cx.g.reshape(merged, &[b, n, d])?;
        let out = self.proj.forward(cx, merged)?;
        Ok((out, weights))
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        self.forward_with_weights(cx, x).map(|(o, _)| o)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(&mut init.sub("fc1"), dim, hidden, true),
            fc2: Linear::new(&mut init.sub("fc2"), hidden, dim, true),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.fc1.forward(cx, x)?;
        let h = cx.g.gelu(h);
        self.fc2.forward(cx, h)
    }
}

/// Pre-norm block: `x += msa(LN(x)); x += mlp(LN(x))`.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub msa: Msa,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    pub fn new(init: &mut Init, cfg: &TransformerConfig) -> Self {
        let d = cfg.embed_dim;
        let hidden = ((d as f64) * cfg.mlp_ratio).round().max(1.0) as usize;
        Self {
            ln1: LayerNorm::new(&mut init.sub("ln1"), d),
            msa: Msa::new(&mut init.sub("msa"), d, cfg.heads),
            ln2: LayerNorm::new(&mut init.sub("ln2"), d),
            mlp: Mlp::new(&mut init.sub("mlp"), d, hidden),
        }
    }

    pub fn forward_with_weights(&self, cx: &mut Ctx, x: Var) -> Result<(Var, Var)> {
        let h = self.ln1.forward(cx, x)?;
        let (a, weights) = self.msa.forward_with_weights(cx, h)?;
        let x = cx.g.add(x, a)?;
        let h = self.ln2.forward(cx, x)?;
        let m = self.mlp.forward(cx, h)?;
        Ok((cx.g.add(x, m)?, weights))
    }
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub patch_size: usize,
    pub grid: (usize, usize),
    pub proj: Linear,
    /// Learned positional embedding `[N, D]`.
    pub pos: ParamId,
}

impl PatchEmbed {
    pub fn new(init: &mut Init, cfg: &TransformerConfig, image_hw: (usize, usize)) -> Self {
        let s = cfg.patch_size;
        let grid = (image_hw.0 / s, image_hw.1 / s);
        let pos = Tensor::randn(&[grid.0 * grid.1, cfg.embed_dim], 0.02, init.rng);
        Self {
            patch_size: s,
            grid,
            proj: Linear::new(&mut init.sub("proj"), 3 * s * s, cfg.embed_dim, true),
            pos: init.param("pos_embed", pos),
        }
    }

    /// `[B, 3, H, W] -> [B, N, 3·S²]`, patches in row-major grid order and
    /// each patch flattened channel-first.
    pub fn patchify(g: &mut Graph, image: Var, s: usize) -> Result<(Var, (usize, usize))> {
        let shape = expect_rank(g, image, 4, "patch_embed")?;
        let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
        if h % s != 0 || w % s != 0 {
            return Err(Error::config(format!(
                "patch size {s} does not divide {h}x{w}"
            )));
        }
        let (gh, gw) = (h / s, w / s);
        let x = g.reshape(image, &[b, c, gh, s, gw, s])?;
        let x = g.permute(x, &[0, 2, 4, 1, 3, 5])?;
        Ok((g.reshape(x, &[b, gh * gw, c * s * s])?, (gh, gw)))
    }

    pub fn forward_opts(&self, cx: &mut Ctx, image: Var, with_pos: bool) -> Result<TokenSequence> {
        let (patches, grid) = Self::patchify(cx.g, image, self.patch_size)?;
        if grid != self.grid {
            return Err(Error::dim(format!(
                "patch grid {:?} does not match the positional embedding grid {:?}",
                grid, self.grid
            )));
        }
        let mut tokens = self.proj.forward(cx, patches)?;
        if with_pos {
            let pos = cx.p(self.pos);
            tokens = cx.g.add(tokens, pos)?;
        }
        Ok(TokenSequence { tokens, grid })
    }

    pub fn forward(&self, cx: &mut Ctx, image: Var) -> Result<TokenSequence> {
        self.forward_opts(cx, image, true)
    }
}

/// `L` pre-norm blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub blocks: Vec<EncoderBlock>,
    pub norm: LayerNorm,
}

impl Encoder {
    pub fn new(init: &mut Init, cfg: &TransformerConfig) -> Self {
        Self {
            blocks: (0..cfg.depth)
                .map(|i| EncoderBlock::new(&mut init.sub(&format!("block{i}")), cfg))
                .collect(),
            norm: LayerNorm::new(&mut init.sub("norm"), cfg.embed_dim),
        }
    }

    /// Encodes the sequence and returns every layer's attention weights.
    pub fn forward_with_weights(
        &self,
        cx: &mut Ctx,
        seq: TokenSequence,
    ) -> Result<(TokenSequence, Vec<Var>)> {
        let mut x = seq.tokens;
        let mut maps = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (y, w) = block.forward_with_weights(cx, x)?;
            x = y;
            maps.push(w);
        }
        let tokens = self.norm.forward(cx, x)?;
        Ok((
            TokenSequence {
                tokens,
                grid: seq.grid,
            },
            maps,
        ))
    }

    pub fn forward(&self, cx: &mut Ctx, seq: TokenSequence) -> Result<TokenSequence> {
        self.forward_with_weights(cx, seq).map(|(s, _)| s)
    }
}

/// Progressive upsampling: the token map keeps `D` channels at /16, then two
/// `3×3 conv → 2× bilinear` stages halve the width each time. A 1×1
/// projection per scale matches the paired CNN width.
#[derive(Clone, Debug)]
pub struct PupDecoder {
    pub stage1: ConvBn,
    pub stage2: ConvBn,
    pub proj: [Conv2d; 3],
}

impl PupDecoder {
    /// `widths` are the CNN channel counts at (/16, /8, /4).
    pub fn new(init: &mut Init, embed_dim: usize, widths: [usize; 3]) -> Self {
        let (d0, d1, d2) = (embed_dim, embed_dim / 2, embed_dim / 4);
        Self {
            stage1: ConvBn::new(&mut init.sub("stage1"), d0, d1, 3, 1, true),
            stage2: ConvBn::new(&mut init.sub("stage2"), d1, d2, 3, 1, true),
            proj: [
                Conv2d::new(&mut init.sub("proj0"), d0, widths[0], 1, 1, 0, true),
                Conv2d::new(&mut init.sub("proj1"), d1, widths[1], 1, 1, 0, true),
                Conv2d::new(&mut init.sub("proj2"), d2, widths[2], 1, 1, 0, true),
            ],
        }
    }

    /// Tokens `[B, N, D]` as a `[B, D, rows, cols]` map.
    pub fn token_map(g: &mut Graph, seq: &TokenSequence) -> Result<Var> {
        let s = expect_rank(g, seq.tokens, 3, "pup_decode")?;
        let (b, n, d) = (s[0], s[1], s[2]);
        if n != seq.grid.0 * seq.grid.1 {
            return Err(Error::dim(format!(
                "{n} tokens do not fill grid {:?}",
                seq.grid
            )));
        }
        let t = g.permute(seq.tokens, &[0, 2, 1])?;
        g.reshape(t, &[b, d, seq.grid.0, seq.grid.1])
    }

    pub fn forward(&self, cx: &mut Ctx, seq: &TokenSequence) -> Result<[Var; 3]> {
        let x0 = Self::token_map(cx.g, seq)?;
        let x1 = self.stage1.forward(cx, x0)?;
        let x1 = cx.g.bilinear_upsample2x(x1)?;
        let x2 = self.stage2.forward(cx, x1)?;
        let x2 = cx.g.bilinear_upsample2x(x2)?;
        Ok([
            self.proj[0].forward(cx, x0)?,
            self.proj[1].forward(cx, x1)?,
            self.proj[2].forward(cx, x2)?,
        ])
    }
}

#[derive(Clone, Debug)]
pub struct TransformerFeatures {
    pub t0: Var,
    pub t1: Var,
    pub t2: Var,
    pub tokens: TokenSequence,
    pub attention_maps: Vec<Var>,
}

impl TransformerFeatures {
    /// `[t0, t1, t2]`, coarsest first.
    pub fn features(&self) -> [Var; 3] {
        [self.t0, self.t1, self.t2]
    }
}

#[derive(Clone, Debug)]
pub struct TransformerBranch {
    pub embed: PatchEmbed,
    pub encoder: Encoder,
    pub decoder: PupDecoder,
}

impl TransformerBranch {
    pub fn new(
        init: &mut Init,
        cfg: &TransformerConfig,
        image_hw: (usize, usize),
        widths: [usize; 3],
    ) -> Self {
        Self {
            embed: PatchEmbed::new(&mut init.sub("embed"), cfg, image_hw),
            encoder: Encoder::new(&mut init.sub("encoder"), cfg),
            decoder: PupDecoder::new(&mut init.sub("decoder"), cfg.embed_dim, widths),
        }
    }

    pub fn forward(&self, cx: &mut Ctx, image: Var) -> Result<TransformerFeatures> {
        let seq = self.embed.forward(cx, image)?;
        let (encoded, attention_maps) = self.encoder.forward_with_weights(cx, seq)?;
        let [t0, t1, t2] = self.decoder.forward(cx, &encoded)?;
        Ok(TransformerFeatures {
            t0,
            t1,
            t2,
            tokens: encoded,
            attention_maps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::rng::RngStream;

    #[test]
    fn single_key_attention_returns_value() {
        let mut rng = RngStream::from_seed(4);
        let mut g = Graph::new();
        let q = g.constant(&Tensor::randn(&[1, 1, 4], 3.0, &mut rng));
        let k = g.constant(&Tensor::randn(&[1, 1, 4], 3.0, &mut rng));
        let vt = Tensor::randn(&[1, 1, 4], 1.0, &mut rng);
        let v = g.constant(&vt);
        let o = attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(o), vt.data());
    }

    #[test]
    fn identical_value_rows_pass_through() {
        let mut rng = RngStream::from_seed(5);
        let mut g = Graph::new();
        let q = g.constant(&Tensor::randn(&[1, 3, 4], 1.0, &mut rng));
        let k = g.constant(&Tensor::randn(&[1, 5, 4], 1.0, &mut rng));
        let row = [0.5, -1.0, 2.0, 0.25];
        let v = g.constant(&Tensor::from_vec(&[1, 5, 4], row.repeat(5)).unwrap());
        let o = attention(&mut g, q, k, v).unwrap();
        for out in g.value(o).chunks(4) {
            for (a, b) in out.iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_dim_mismatch_is_rejected() {
        let mut g = Graph::new();
        let q = g.constant(&Tensor::zeros(&[1, 2, 4]));
        let k = g.constant(&Tensor::zeros(&[1, 2, 3]));
        assert!(matches!(
            attention(&mut g, q, k, k),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn patch_embed_counts_and_positional_identity() {
        let cfg = TransformerConfig::toy();
        let mut ps = ParamStore::new();
        let mut rng = RngStream::from_seed(1);
        let pe = PatchEmbed::new(&mut Init::new(&mut ps, &mut rng), &cfg, (192, 256));
        assert_eq!(pe.grid, (12, 16));
        for p in ps.params_mut() {
            if p.name.starts_with("proj") {
                p.tensor.data_mut().fill(0.0);
            }
        }
        let mut g = Graph::new();
        let img = g.constant(&Tensor::zeros(&[1, 3, 192, 256]));
        let seq = pe.forward(&mut Ctx::new(&mut g, &ps, false), img).unwrap();
        assert_eq!(g.shape(seq.tokens), &[1, 192, 64]);
        assert_eq!(g.value(seq.tokens), ps.param(pe.pos).data());
    }

    #[test]
    fn single_patch_image_gives_one_token() {
        let cfg = TransformerConfig::toy();
        let mut ps = ParamStore::new();
        let mut rng = RngStream::from_seed(1);
        let pe = PatchEmbed::new(&mut Init::new(&mut ps, &mut rng), &cfg, (16, 16));
        let mut g = Graph::new();
        let img = g.constant(&Tensor::randn(&[2, 3, 16, 16], 1.0, &mut rng));
        let seq = pe.forward(&mut Ctx::new(&mut g, &ps, false), img).unwrap();
        assert_eq!(g.shape(seq.tokens), &[2, 1, 64]);
    }

    #[test]
    fn patchify_orders_pixels_channel_first() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..3 * 4 * 4).map(f64::from).collect();
        let img = g.constant(&Tensor::from_vec(&[1, 3, 4, 4], data).unwrap());
        let (p, grid) = PatchEmbed::patchify(&mut g, img, 2).unwrap();
        assert_eq!(grid, (2, 2));
        assert_eq!(g.shape(p), &[1, 4, 12]);
        // second patch (row 0, col 1) of channel 0 is pixels (0,2),(0,3),(1,2),(1,3)
        assert_eq!(&g.value(p)[12..16], &[2., 3., 6., 7.]);
        // channel 1 follows
        assert_eq!(&g.value(p)[16..20], &[18., 19., 22., 23.]);
    }

    #[test]
    fn presets() {
        let p = TransformerConfig::large();
        assert_eq!(
            (p.patch_size, p.embed_dim, p.heads, p.depth),
            (16, 384, 6, 8)
        );
        p.validate().unwrap();
        TransformerConfig::toy().validate().unwrap();
        let bad = TransformerConfig {
            heads: 5,
            ..TransformerConfig::toy()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn pup_shapes_for_large_input() {
        let cfg = TransformerConfig::toy();
        let mut ps = ParamStore::new();
        let mut rng = RngStream::from_seed(1);
        let br = TransformerBranch::new(
            &mut Init::new(&mut ps, &mut rng),
            &cfg,
            (192, 256),
            [64, 32, 16],
        );
        let mut g = Graph::new();
        let img = g.constant(&Tensor::randn(&[1, 3, 192, 256], 1.0, &mut rng));
        let f = br.forward(&mut Ctx::new(&mut g, &ps, false), img).unwrap();
        assert_eq!(g.shape(f.t0), &[1, 64, 12, 16]);
        assert_eq!(g.shape(f.t1), &[1, 32, 24, 32]);
        assert_eq!(g.shape(f.t2), &[1, 16, 48, 64]);
        assert_eq!(f.attention_maps.len(), 2);
        assert_eq!(g.shape(f.attention_maps[0]), &[1, 4, 192, 192]);
    }
}

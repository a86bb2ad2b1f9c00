//! Mask features, audio-constrained queries, and the mask and reference heads.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{CatrError, Result};
use crate::features::{AudioFeatures, VideoFeatures, VisualPyramid};
use crate::nn::{Conv2d, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Top-down feature pyramid producing stride-8 mask features.
///
/// Starting from the fused encoder output at stride 8, each configured level
/// (coarse to fine) adds a 1×1-projected lateral from the backbone and applies
/// a 3×3 convolution, upsampling ×2 whenever the next level is finer. If the
/// finest level is below stride 8 the result is average-pooled back to it.
#[derive(Clone, Debug)]
pub struct SegHead {
    strides: Vec<usize>,
    laterals: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
}

/// Mask features `[T, P, C]` on the stride-8 grid.
#[derive(Clone, Copy, Debug)]
pub struct SegFeatures {
    pub tokens: Var,
    pub grid: (usize, usize),
}

impl SegHead {
    /// `strides` is any non-empty subset of {8, 4, 2} and must include 8.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        strides: &[usize],
        rng: &mut R,
    ) -> Result<Self> {
        let mut s = strides.to_vec();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s.dedup();
        if s.first() != Some(&8) || s.iter().any(|x| ![2, 4, 8].contains(x)) {
            return Err(CatrError::Config(format!("fpn strides {strides:?} must include 8 and be drawn from 2, 4, 8")));
        }
        let mut laterals = Vec::new();
        let mut smooth = Vec::new();
        for &stride in &s {
            let cin = channels * stride / 8;
            laterals.push(Conv2d::new(store, &format!("{name}.lateral{stride}"), cin, channels, 1, 1, rng)?);
            smooth.push(Conv2d::new(store, &format!("{name}.smooth{stride}"), channels, channels, 3, 1, rng)?);
        }
        Ok(Self { strides: s, laterals, smooth })
    }

    pub fn build_seg_features(
        &self,
        g: &mut Graph<'_>,
        fused: VideoFeatures,
        pyramid: &VisualPyramid,
    ) -> Result<SegFeatures> {
        let (t, _, c) = fused.dims(g);
        let (h, w) = fused.grid;
        if let Some(l8) = pyramid.level(8) {
            let s = g.shape(l8.map);
            if (s[1], s[2]) != (h, w) {
                return Err(CatrError::Config(format!(
                    "encoder grid {h}x{w} does not match the stride-8 pyramid level {}x{}",
                    s[1], s[2]
                )));
            }
        }
        let mut x = g.reshape(fused.tokens, &[t, h, w, c])?;
        let mut current = 8;
        for ((&stride, lat), sm) in self.strides.iter().zip(&self.laterals).zip(&self.smooth) {
            let level = pyramid
                .level(stride)
                .ok_or_else(|| CatrError::Config(format!("pyramid has no stride-{stride} level")))?;
            while current > stride {
                x = g.upsample2x(x)?;
                current /= 2;
            }
            let side = lat.forward(g, level.map)?;
            if g.shape(side) != g.shape(x) {
                return Err(CatrError::shapes("fpn lateral", g.shape(side), g.shape(x)));
            }
            x = g.add(x, side)?;
            x = sm.forward(g, x)?;
        }
        if current < 8 {
            x = g.avg_pool(x, 8 / current)?;
        }
        let tokens = g.reshape(x, &[t, h * w, c])?;
        Ok(SegFeatures { tokens, grid: (h, w) })
    }
}

/// Self-attention, cross-attention and feed-forward, each with residual and
/// layer norm.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub ffn: Mlp,
    pub ffn_norm: LayerNorm,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self"), channels, heads, rng)?,
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), channels)?,
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross"), channels, heads, rng)?,
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), channels)?,
            ffn: Mlp::new(store, &format!("{name}.ffn"), [channels, 2 * channels, channels], rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), channels)?,
        })
    }

    /// `x`: `[1, N, C]`; `pos`: `[C]`; `memory`: `[1, L, C]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, pos: Var, memory: Var) -> Result<Var> {
        let qk = g.add(x, pos)?;
        let sa = self.self_attn.forward(g, qk, qk, x)?;
        let x = g.add(x, sa)?;
        let x = self.self_norm.forward(g, x)?;
        let q = g.add(x, pos)?;
        let ca = self.cross_attn.forward(g, q, memory, memory)?;
        let x = g.add(x, ca)?;
        let x = self.cross_norm.forward(g, x)?;
        let ff = self.ffn.forward(g, x)?;
        let x = g.add(x, ff)?;
        self.ffn_norm.forward(g, x)
    }
}

/// Learnable queries decoded against the mask features, then turned into
/// per-frame dynamic mask kernels and reference scores.
#[derive(Clone, Debug)]
pub struct QueryDecoder {
    pub content: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub kernel: Mlp,
    pub reference: Linear,
    pub num_queries: usize,
    pub channels: usize,
}

/// Per-query outputs. Masks are `[N, T, P]` on the stride-8 grid;
/// reference scores are `[N, T, 2]` with index 1 meaning "referred and visible".
#[derive(Clone, Copy, Debug)]
pub struct DecoderOutput {
    pub decoded: Var,
    pub mask_logits: Var,
    pub reference_logits: Var,
    pub reference_probs: Var,
}

impl QueryDecoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        num_queries: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_queries == 0 {
            return Err(CatrError::Config("num_queries must be at least 1".into()));
        }
        let content = store.add(&format!("{name}.queries"), Tensor::randn(&[num_queries, channels], 1.0, rng))?;
        let layers = (0..depth)
            .map(|i| DecoderLayer::new(store, &format!("{name}.layer{i}"), channels, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            content,
            layers,
            kernel: Mlp::new(store, &format!("{name}.kernel"), [2 * channels, channels, channels + 1], rng)?,
            reference: Linear::new(store, &format!("{name}.reference"), 2 * channels, 2, true, rng)?,
            num_queries,
            channels,
        })
    }

    /// Runs the decoder layers; returns decoded queries `[N, C]`.
    pub fn decode_queries(&self, g: &mut Graph<'_>, audio: AudioFeatures, seg: SegFeatures) -> Result<Var> {
        let (t, c) = audio.dims(g);
        let ss = g.shape(seg.tokens).to_vec();
        if ss.len() != 3 || ss[0] != t || ss[2] != c || c != self.channels {
            return Err(CatrError::Dimension(format!(
                "decoder: audio [T={t}, C={c}] and seg features {ss:?} inconsistent with {} channels",
                self.channels
            )));
        }
        let pos = g.mean_pool(audio.tokens, 0)?;
        let memory = g.reshape(seg.tokens, &[1, ss[0] * ss[1], c])?;
        let content = g.param(self.content);
        let mut x = g.reshape(content, &[1, self.num_queries, c])?;
        for layer in &self.layers {
            x = layer.forward(g, x, pos, memory)?;
        }
        g.reshape(x, &[self.num_queries, c])
    }

    /// `[N, T, 2C]`: each decoded query paired with each frame's audio.
    fn pair_with_audio(&self, g: &mut Graph<'_>, decoded: Var, audio: AudioFeatures) -> Result<Var> {
        let (t, _) = audio.dims(g);
        let q = g.expand(decoded, 1, t)?;
        let a = g.expand(audio.tokens, 0, self.num_queries)?;
        g.concat(&[q, a], 2)
    }

    /// Mask logits `[N, T, P]` from per-query, per-frame 1×1 dynamic kernels.
    pub fn dynamic_masks(&self, g: &mut Graph<'_>, decoded: Var, audio: AudioFeatures, seg: SegFeatures) -> Result<Var> {
        let paired = self.pair_with_audio(g, decoded, audio)?;
        let kernels = self.kernel.forward(g, paired)?; // [N, T, C+1]
        let c = self.channels;
        let weights = g.slice(kernels, 2, 0, c)?;
        let weights = g.permute(weights, &[1, 2, 0])?; // [T, C, N]
        let bias = g.slice(kernels, 2, c, 1)?;
        let frames = g.shape(kernels)[1];
        let bias = g.reshape(bias, &[self.num_queries, frames])?;
        let bias = g.permute(bias, &[1, 0])?; // [T, N]
        let p = g.shape(seg.tokens)[1];
        let bias = g.expand(bias, 1, p)?; // [T, P, N]
        let logits = g.matmul(seg.tokens, weights)?; // [T, P, N]
        let logits = g.add(logits, bias)?;
        g.permute(logits, &[2, 0, 1])
    }

    /// Reference logits and probabilities, both `[N, T, 2]`.
    pub fn reference_head(&self, g: &mut Graph<'_>, decoded: Var, audio: AudioFeatures) -> Result<(Var, Var)> {
        let paired = self.pair_with_audio(g, decoded, audio)?;
        let logits = self.reference.forward(g, paired)?;
        let probs = g.softmax(logits, 2)?;
        Ok((logits, probs))
    }

    pub fn forward(&self, g: &mut Graph<'_>, audio: AudioFeatures, seg: SegFeatures) -> Result<DecoderOutput> {
        let decoded = self.decode_queries(g, audio, seg)?;
        let mask_logits = self.dynamic_masks(g, decoded, audio, seg)?;
        let (reference_logits, reference_probs) = self.reference_head(g, decoded, audio)?;
        Ok(DecoderOutput { decoded, mask_logits, reference_logits, reference_probs })
    }
}

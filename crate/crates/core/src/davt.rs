//! Decoupled audio-visual transformer encoder.
//!
//! Each block runs three attentions instead of one joint attention over all
//! `T·(P+1)` tokens:
//!
//! 1. spatial fusion: per frame, self-attention over the `P` video tokens plus
//!    that frame's audio token (`T` problems of `P+1` tokens);
//! 2. temporal A→V: per spatial position, the `T` video tokens attend to the
//!    `T` audio tokens (`P` problems of `T×T`);
//! 3. temporal V→A: the `T` audio tokens attend to the `T` spatially pooled
//!    video tokens (one `T×T` problem).
//!
//! Every step is followed by a residual connection and layer normalization.
//! The V→A result is audio-shaped; it is broadcast over the spatial positions
//! before being added to the A→V result.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{CatrError, Result};
use crate::features::{AudioFeatures, VideoFeatures};
use crate::nn::{attention_core, Graph, LayerNorm, MultiHeadAttention, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct DavtBlock {
    pub spatial: MultiHeadAttention,
    pub spatial_norm: LayerNorm,
    pub tav: MultiHeadAttention,
    pub tav_norm: LayerNorm,
    pub tva: MultiHeadAttention,
    pub tva_norm: LayerNorm,
    pub merge_norm: LayerNorm,
    /// When false the A→V step is skipped (`v̂ = ṽ`), for ablations.
    pub temporal_av: bool,
}

fn check_pair(g: &Graph<'_>, v: &VideoFeatures, a: &AudioFeatures) -> Result<(usize, usize, usize)> {
    let (t, p, c) = v.dims(g);
    let (ta, ca) = a.dims(g);
    if t != ta || c != ca {
        return Err(CatrError::Dimension(format!(
            "video features [T={t}, P={p}, C={c}] and audio features [T={ta}, C={ca}] disagree"
        )));
    }
    Ok((t, p, c))
}

impl DavtBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            spatial: MultiHeadAttention::new(store, &format!("{name}.spatial"), channels, heads, rng)?,
            spatial_norm: LayerNorm::new(store, &format!("{name}.spatial_norm"), channels)?,
            tav: MultiHeadAttention::new(store, &format!("{name}.tav"), channels, heads, rng)?,
            tav_norm: LayerNorm::new(store, &format!("{name}.tav_norm"), channels)?,
            tva: MultiHeadAttention::new(store, &format!("{name}.tva"), channels, heads, rng)?,
            tva_norm: LayerNorm::new(store, &format!("{name}.tva_norm"), channels)?,
            merge_norm: LayerNorm::new(store, &format!("{name}.merge_norm"), channels)?,
            temporal_av: true,
        })
    }

    /// Per-frame self-attention over `[P video tokens ; 1 audio token]`.
    pub fn spatial_fusion(
        &self,
        g: &mut Graph<'_>,
        v: VideoFeatures,
        a: AudioFeatures,
    ) -> Result<(VideoFeatures, AudioFeatures)> {
        let (t, p, c) = check_pair(g, &v, &a)?;
        let audio_tok = g.reshape(a.tokens, &[t, 1, c])?;
        let seq = g.concat(&[v.tokens, audio_tok], 1)?;
        let att = self.spatial.forward(g, seq, seq, seq)?;
        let res = g.add(seq, att)?;
        let fused = self.spatial_norm.forward(g, res)?;
        let video = g.slice(fused, 1, 0, p)?;
        let audio = g.slice(fused, 1, p, 1)?;
        let audio = g.reshape(audio, &[t, c])?;
        Ok((VideoFeatures::new(g, video, v.grid)?, AudioFeatures::new(g, audio)?))
    }

    /// Per-position cross-attention: video frames query the audio frames.
    pub fn temporal_av(&self, g: &mut Graph<'_>, v: VideoFeatures, a: AudioFeatures) -> Result<VideoFeatures> {
        let (t, p, c) = check_pair(g, &v, &a)?;
        let by_pos = g.permute(v.tokens, &[1, 0, 2])?; // [P, T, C]
        let q = self.tav.q.forward(g, by_pos)?;
        let k = self.tav.k.forward(g, a.tokens)?;
        let val = self.tav.v.forward(g, a.tokens)?;
        // audio keys and values are shared by every spatial position
        let k = g.expand(k, 0, p)?;
        let val = g.expand(val, 0, p)?;
        let att = attention_core(g, q, k, val, self.tav.heads)?;
        let att = self.tav.o.forward(g, att)?;
        let att = g.permute(att, &[1, 0, 2])?; // [T, P, C]
        debug_assert_eq!(g.shape(att), &[t, p, c]);
        let res = g.add(v.tokens, att)?;
        let out = self.tav_norm.forward(g, res)?;
        VideoFeatures::new(g, out, v.grid)
    }

    /// Audio frames query the spatially pooled video frames. Returns the
    /// updated audio and its broadcast over every spatial position.
    pub fn temporal_va(
        &self,
        g: &mut Graph<'_>,
        v: VideoFeatures,
        a: AudioFeatures,
    ) -> Result<(VideoFeatures, AudioFeatures)> {
        let (t, p, c) = check_pair(g, &v, &a)?;
        let pooled = g.mean_pool(v.tokens, 1)?; // [T, C]
        let q = g.reshape(a.tokens, &[1, t, c])?;
        let kv = g.reshape(pooled, &[1, t, c])?;
        let att = self.tva.forward(g, q, kv, kv)?;
        let att = g.reshape(att, &[t, c])?;
        let res = g.add(a.tokens, att)?;
        let audio = self.tva_norm.forward(g, res)?;
        let video = g.expand(audio, 1, p)?;
        Ok((VideoFeatures::new(g, video, v.grid)?, AudioFeatures::new(g, audio)?))
    }

    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        v: VideoFeatures,
        a: AudioFeatures,
    ) -> Result<(VideoFeatures, AudioFeatures)> {
        let (sv, sa) = self.spatial_fusion(g, v, a)?;
        let v_hat = if self.temporal_av { self.temporal_av(g, sv, sa)? } else { sv };
        let (v_check, a_check) = self.temporal_va(g, sv, sa)?;
        let merged = g.add(v_hat.tokens, v_check.tokens)?;
        let merged = self.merge_norm.forward(g, merged)?;
        Ok((VideoFeatures::new(g, merged, v.grid)?, a_check))
    }
}

/// Output of [`encode`]: the video output of every block, and the final audio.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    pub blocks: Vec<VideoFeatures>,
    pub audio: AudioFeatures,
}

/// Runs the blocks in sequence, keeping each block's video output.
pub fn encode(
    g: &mut Graph<'_>,
    v: VideoFeatures,
    a: AudioFeatures,
    blocks: &[DavtBlock],
) -> Result<EncoderOutput> {
    if blocks.is_empty() {
        return Err(CatrError::Config("the encoder needs at least one block".into()));
    }
    let mut outs = Vec::with_capacity(blocks.len());
    let (mut v, mut a) = (v, a);
    for block in blocks {
        (v, a) = block.forward(g, v, a)?;
        outs.push(v);
    }
    Ok(EncoderOutput { blocks: outs, audio: a })
}

/// Learned temporal position embedding followed by a stack of blocks.
#[derive(Clone, Debug)]
pub struct DavtEncoder {
    pub time_embed: ParamId,
    pub blocks: Vec<DavtBlock>,
}

impl DavtEncoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        frames: usize,
        channels: usize,
        heads: usize,
        depth: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(CatrError::Config("the encoder needs at least one block".into()));
        }
        let time_embed = store.add(&format!("{name}.time_embed"), Tensor::randn(&[frames, channels], 0.02, rng))?;
        let blocks = (0..depth)
            .map(|i| DavtBlock::new(store, &format!("{name}.block{i}"), channels, heads, rng))
            .collect::<Result<_>>()?;
        Ok(Self { time_embed, blocks })
    }

    pub fn forward(&self, g: &mut Graph<'_>, v: VideoFeatures, a: AudioFeatures) -> Result<EncoderOutput> {
        let (t, p, _) = check_pair(g, &v, &a)?;
        let pos = g.param(self.time_embed);
        if g.shape(pos)[0] != t {
            return Err(CatrError::Config(format!(
                "encoder was built for {} frames, got {t}",
                g.shape(pos)[0]
            )));
        }
        let a_pos = g.add(a.tokens, pos)?;
        let v_pos = g.expand(pos, 1, p)?;
        let v_pos = g.add(v.tokens, v_pos)?;
        let v = VideoFeatures::new(g, v_pos, v.grid)?;
        let a = AudioFeatures::new(g, a_pos)?;
        encode(g, v, a, &self.blocks)
    }
}

/// Helper used by tests and the gradient suite: place `[T, P, C]` / `[T, C]`
/// tensors on a graph as features.
pub fn features_from(
    g: &mut Graph<'_>,
    video: Var,
    audio: Var,
    grid: (usize, usize),
) -> Result<(VideoFeatures, AudioFeatures)> {
    Ok((VideoFeatures::new(g, video, grid)?, AudioFeatures::new(g, audio)?))
}

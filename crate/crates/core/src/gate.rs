//! Blockwise gate: fuses the video outputs of successive encoder blocks.
//!
//! Two block outputs are concatenated along channels, projected to two gate
//! vectors with a per-token linear map, squashed with a sigmoid and averaged
//! over frames and positions. The fused map is a linear projection of the
//! gated sum. More than two blocks are folded from the left.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{CatrError, Result};
use crate::features::VideoFeatures;
use crate::nn::{Graph, Linear, ParamStore};

#[derive(Clone, Debug)]
pub struct GateUnit {
    pub gate: Linear,
    pub out: Linear,
    /// Channels in each gate vector; each gate value covers `C / gate_channels`
    /// consecutive feature channels.
    pub gate_channels: usize,
    pub channels: usize,
}

/// Gate vectors (each `[C]`, values in (0, 1)) and the fused features.
#[derive(Clone, Copy, Debug)]
pub struct GateOutput {
    pub first: Var,
    pub second: Var,
    pub fused: VideoFeatures,
}

impl GateUnit {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        gate_channels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if gate_channels == 0 || !channels.is_multiple_of(gate_channels) {
            return Err(CatrError::Config(format!(
                "gate_channels {gate_channels} must divide the feature channels {channels}"
            )));
        }
        Ok(Self {
            gate: Linear::new(store, &format!("{name}.gate"), 2 * channels, 2 * gate_channels, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), channels, channels, true, rng)?,
            gate_channels,
            channels,
        })
    }

    fn widen(&self, g: &mut Graph<'_>, gate: Var) -> Result<Var> {
        let rep = self.channels / self.gate_channels;
        if rep == 1 {
            return Ok(gate);
        }
        let wide = g.expand(gate, 1, rep)?;
        g.reshape(wide, &[self.channels])
    }

    pub fn gate_pair(&self, g: &mut Graph<'_>, a: VideoFeatures, b: VideoFeatures) -> Result<GateOutput> {
        let (sa, sb) = (g.shape(a.tokens).to_vec(), g.shape(b.tokens).to_vec());
        if sa != sb || a.grid != b.grid {
            return Err(CatrError::shapes("gate_pair", &sa, &sb));
        }
        if sa[2] != self.channels {
            return Err(CatrError::Dimension(format!(
                "gate expects {} channels, got {:?}",
                self.channels, sa
            )));
        }
        let both = g.concat(&[a.tokens, b.tokens], 2)?;
        let logits = self.gate.forward(g, both)?;
        let probs = g.sigmoid(logits);
        let pooled = g.mean_pool(probs, 0)?;
        let pooled = g.mean_pool(pooled, 0)?; // [2g]
        let k = self.gate_channels;
        let first = g.slice(pooled, 0, 0, k)?;
        let first = self.widen(g, first)?;
        let second = g.slice(pooled, 0, k, k)?;
        let second = self.widen(g, second)?;
        let ga = g.mul(a.tokens, first)?;
        let gb = g.mul(b.tokens, second)?;
        let sum = g.add(ga, gb)?;
        let fused = self.out.forward(g, sum)?;
        Ok(GateOutput { first, second, fused: VideoFeatures::new(g, fused, a.grid)? })
    }
}

/// Left fold of gate units over the block outputs. `units.len()` must be
/// `blocks.len() - 1`; a single block is returned unchanged.
pub fn gate_fold(g: &mut Graph<'_>, blocks: &[VideoFeatures], units: &[GateUnit]) -> Result<VideoFeatures> {
    let (first, rest) = blocks
        .split_first()
        .ok_or_else(|| CatrError::Config("gate_fold needs at least one block".into()))?;
    if units.len() != rest.len() {
        return Err(CatrError::Config(format!(
            "{} blocks need {} gate units, got {}",
            blocks.len(),
            rest.len(),
            units.len()
        )));
    }
    let mut acc = *first;
    for (unit, next) in units.iter().zip(rest) {
        acc = unit.gate_pair(g, acc, *next)?.fused;
    }
    Ok(acc)
}

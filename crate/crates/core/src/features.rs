//! Stand-in visual and audio front ends.
//!
//! The visual stub is three stride-2 3×3 convolutions with ReLU producing a
//! pyramid at strides 2, 4 and 8 with `C/4`, `C/2` and `C` channels. The audio
//! stub is a single linear map from the 128-d per-frame descriptor to `C`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{CatrError, Result};
use crate::nn::{Conv2d, Graph, Linear, ParamStore};

/// Width of the raw per-frame audio descriptor.
pub const AUDIO_DIM: usize = 128;

/// Video tokens `[T, P, C]` laid out over an `h × w` grid (`P = h·w`).
#[derive(Clone, Copy, Debug)]
pub struct VideoFeatures {
    pub tokens: Var,
    pub grid: (usize, usize),
}

impl VideoFeatures {
    pub fn new(t: &Tape, tokens: Var, grid: (usize, usize)) -> Result<Self> {
        let s = t.shape(tokens);
        if s.len() != 3 || s[1] != grid.0 * grid.1 {
            return Err(CatrError::Dimension(format!(
                "video tokens {s:?} do not match a {}x{} grid",
                grid.0, grid.1
            )));
        }
        Ok(Self { tokens, grid })
    }

    /// `(T, P, C)`.
    pub fn dims(&self, t: &Tape) -> (usize, usize, usize) {
        let s = t.shape(self.tokens);
        (s[0], s[1], s[2])
    }
}

/// One audio token per frame, `[T, C]`.
#[derive(Clone, Copy, Debug)]
pub struct AudioFeatures {
    pub tokens: Var,
}

impl AudioFeatures {
    pub fn new(t: &Tape, tokens: Var) -> Result<Self> {
        if t.shape(tokens).len() != 2 {
            return Err(CatrError::Dimension(format!("audio tokens must be [T, C], got {:?}", t.shape(tokens))));
        }
        Ok(Self { tokens })
    }

    /// `(T, C)`.
    pub fn dims(&self, t: &Tape) -> (usize, usize) {
        let s = t.shape(self.tokens);
        (s[0], s[1])
    }
}

/// One pyramid level, `[T, H/stride, W/stride, channels]`.
#[derive(Clone, Copy, Debug)]
pub struct PyramidLevel {
    pub stride: usize,
    pub map: Var,
}

#[derive(Clone, Debug)]
pub struct VisualPyramid {
    /// Ordered fine to coarse: strides 2, 4, 8.
    pub levels: Vec<PyramidLevel>,
}

impl VisualPyramid {
    pub fn level(&self, stride: usize) -> Option<PyramidLevel> {
        self.levels.iter().copied().find(|l| l.stride == stride)
    }

    /// Deepest level flattened to `[T, P, C]`.
    pub fn deepest_tokens(&self, t: &mut Tape) -> Result<VideoFeatures> {
        let last = *self.levels.last().ok_or_else(|| CatrError::Config("empty pyramid".into()))?;
        let s = t.shape(last.map).to_vec();
        let tokens = t.reshape(last.map, &[s[0], s[1] * s[2], s[3]])?;
        VideoFeatures::new(t, tokens, (s[1], s[2]))
    }
}

#[derive(Clone, Debug)]
pub struct VisualBackbone {
    convs: Vec<Conv2d>,
    pub channels: Vec<usize>,
}

impl VisualBackbone {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        if !channels.is_multiple_of(4) || channels == 0 {
            return Err(CatrError::Config(format!("backbone channels {channels} must be a positive multiple of 4")));
        }
        let widths = vec![channels / 4, channels / 2, channels];
        let mut convs = Vec::with_capacity(3);
        let mut cin = 3;
        for (i, &cout) in widths.iter().enumerate() {
            convs.push(Conv2d::new(store, &format!("{name}.conv{i}"), cin, cout, 3, 2, rng)?);
            cin = cout;
        }
        Ok(Self { convs, channels: widths })
    }

    /// `video`: `[T, H, W, 3]` with `H` and `W` divisible by 8.
    pub fn extract_visual(&self, g: &mut Graph<'_>, video: Var) -> Result<VisualPyramid> {
        let s = g.shape(video).to_vec();
        if s.len() != 4 || s[3] != 3 {
            return Err(CatrError::Dimension(format!("video must be [T, H, W, 3], got {s:?}")));
        }
        if !s[1].is_multiple_of(8) || !s[2].is_multiple_of(8) {
            return Err(CatrError::Config(format!("frame size {}x{} is not divisible by 8", s[1], s[2])));
        }
        let mut x = video;
        let mut levels = Vec::with_capacity(3);
        for (i, conv) in self.convs.iter().enumerate() {
            let y = conv.forward(g, x)?;
            x = g.relu(y);
            levels.push(PyramidLevel { stride: 2 << i, map: x });
        }
        Ok(VisualPyramid { levels })
    }
}

#[derive(Clone, Debug)]
pub struct AudioEmbedding {
    pub proj: Linear,
}

impl AudioEmbedding {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, channels: usize, rng: &mut R) -> Result<Self> {
        Ok(Self { proj: Linear::new(store, name, AUDIO_DIM, channels, true, rng)? })
    }

    /// `raw`: `[T, 128]`.
    pub fn embed_audio(&self, g: &mut Graph<'_>, raw: Var) -> Result<AudioFeatures> {
        let s = g.shape(raw).to_vec();
        if s.len() != 2 || s[1] != AUDIO_DIM {
            return Err(CatrError::Dimension(format!("raw audio must be [T, {AUDIO_DIM}], got {s:?}")));
        }
        let tokens = self.proj.forward(g, raw)?;
        AudioFeatures::new(g, tokens)
    }
}

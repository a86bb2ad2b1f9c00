//! The full network: stub front ends, DAVT encoder, blockwise gate, mask
//! feature pyramid and query decoder.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::davt::DavtEncoder;
use crate::decoder::{QueryDecoder, SegHead};
use crate::error::{CatrError, Result};
use crate::features::{AudioEmbedding, VisualBackbone, AUDIO_DIM};
use crate::gate::{gate_fold, GateUnit};
use crate::nn::{Graph, ParamStore};
use crate::tensor::Tensor;

const MODEL_FILE: &str = "model.json";

#[derive(Clone, Debug)]
pub struct Catr {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    backbone: VisualBackbone,
    audio: AudioEmbedding,
    encoder: DavtEncoder,
    gates: Vec<GateUnit>,
    seg: SegHead,
    decoder: QueryDecoder,
}

/// Per-query predictions for one video. Masks live on the stride-8 grid.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[N, T, P]`.
    pub mask_logits: Var,
    /// `[N, T, 2]`.
    pub reference_logits: Var,
    /// `[N, T, 2]`.
    pub reference_probs: Var,
    pub grid: (usize, usize),
}

impl Catr {
    /// Builds a freshly initialized model; parameters depend only on `seed`.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let backbone = VisualBackbone::new(&mut store, "backbone", c, &mut rng)?;
        let audio = AudioEmbedding::new(&mut store, "audio", c, &mut rng)?;
        let mut encoder = DavtEncoder::new(&mut store, "encoder", cfg.frames, c, cfg.heads, cfg.blocks, &mut rng)?;
        for b in &mut encoder.blocks {
            b.temporal_av = cfg.use_temporal_av;
        }
        let gates = if cfg.use_gate {
            (1..cfg.blocks)
                .map(|i| GateUnit::new(&mut store, &format!("gate{i}"), c, cfg.gate_channels, &mut rng))
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        let seg = SegHead::new(&mut store, "fpn", c, &cfg.fpn_strides, &mut rng)?;
        let decoder = QueryDecoder::new(&mut store, "decoder", c, cfg.heads, cfg.num_queries, cfg.decoder_layers, &mut rng)?;
        Ok(Self { cfg: cfg.clone(), store, backbone, audio, encoder, gates, seg, decoder })
    }

    pub fn check_inputs(&self, video: &Tensor, audio: &Tensor) -> Result<()> {
        let c = &self.cfg;
        let want_v = [c.frames, c.height, c.width, 3];
        if video.shape() != want_v {
            return Err(CatrError::shapes("model video input", video.shape(), &want_v));
        }
        let want_a = [c.frames, AUDIO_DIM];
        if audio.shape() != want_a {
            return Err(CatrError::shapes("model audio input", audio.shape(), &want_a));
        }
        Ok(())
    }

    /// `video`: `[T, H, W, 3]` in [0, 1]; `audio`: `[T, 128]`.
    pub fn forward(&self, g: &mut Graph<'_>, video: &Tensor, audio: &Tensor) -> Result<ModelOutput> {
        self.check_inputs(video, audio)?;
        let v = g.constant(video);
        let v = g.shift(v, -0.5);
        let a = g.constant(audio);
        let pyramid = self.backbone.extract_visual(g, v)?;
        let tokens = pyramid.deepest_tokens(g)?;
        let audio = self.audio.embed_audio(g, a)?;
        let enc = self.encoder.forward(g, tokens, audio)?;
        let fused = if self.cfg.use_gate {
            gate_fold(g, &enc.blocks, &self.gates)?
        } else {
            *enc.blocks.last().expect("encoder has at least one block")
        };
        let seg = self.seg.build_seg_features(g, fused, &pyramid)?;
        let out = self.decoder.forward(g, enc.audio, seg)?;
        Ok(ModelOutput {
            mask_logits: out.mask_logits,
            reference_logits: out.reference_logits,
            reference_probs: out.reference_probs,
            grid: seg.grid,
        })
    }

    /// Writes the parameters and the model configuration to `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store.save(dir)?;
        let path = dir.join(MODEL_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.cfg)?).map_err(|e| CatrError::io(&path, e))
    }

    /// Rebuilds a model from a checkpoint directory written by [`Catr::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| CatrError::io(&path, e))?;
        let cfg: ModelConfig = serde_json::from_str(&text)?;
        let mut model = Self::new(&cfg, 0)?;
        model.store.load_into(dir)?;
        Ok(model)
    }

    /// Loads a checkpoint that must match `expected`.
    pub fn load_matching(dir: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(dir)?;
        if &model.cfg != expected {
            return Err(CatrError::Config(format!(
                "checkpoint {} was trained with a different model configuration",
                dir.display()
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny() -> ModelConfig {
        let mut m = RunConfig::desk().model;
        m.channels = 8;
        m.heads = 2;
        m.gate_channels = 4;
        m.num_queries = 3;
        m.decoder_layers = 1;
        m.frames = 2;
        m.height = 16;
        m.width = 16;
        m
    }

    fn inputs(cfg: &ModelConfig) -> (Tensor, Tensor) {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        (
            Tensor::uniform(&[cfg.frames, cfg.height, cfg.width, 3], 1.0, &mut r),
            Tensor::randn(&[cfg.frames, AUDIO_DIM], 1.0, &mut r),
        )
    }

    #[test]
    fn output_shapes_and_ablation_variants() {
        for (gate, tav) in [(true, true), (false, true), (true, false)] {
            let mut cfg = tiny();
            cfg.use_gate = gate;
            cfg.use_temporal_av = tav;
            let m = Catr::new(&cfg, 1).unwrap();
            let (v, a) = inputs(&cfg);
            let mut g = Graph::new(&m.store);
            let out = m.forward(&mut g, &v, &a).unwrap();
            assert_eq!(g.shape(out.mask_logits), &[3, 2, 4]);
            assert_eq!(g.shape(out.reference_probs), &[3, 2, 2]);
            assert_eq!(out.grid, (2, 2));
        }
        let full = Catr::new(&tiny(), 1).unwrap();
        let mut cfg = tiny();
        cfg.use_gate = false;
        assert!(Catr::new(&cfg, 1).unwrap().store.len() < full.store.len());
    }

    #[test]
    fn rejects_wrong_input_shapes() {
        let cfg = tiny();
        let m = Catr::new(&cfg, 1).unwrap();
        let (v, _) = inputs(&cfg);
        let mut g = Graph::new(&m.store);
        let bad = Tensor::zeros(&[2, 64]);
        assert!(matches!(m.forward(&mut g, &v, &bad), Err(CatrError::Dimension(_))));
    }

    #[test]
    fn save_load_reproduces_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let m = Catr::new(&cfg, 7).unwrap();
        m.save(dir.path()).unwrap();
        let back = Catr::load(dir.path()).unwrap();
        let (v, a) = inputs(&cfg);
        let run = |m: &Catr| {
            let mut g = Graph::new(&m.store);
            let out = m.forward(&mut g, &v, &a).unwrap();
            g.value(out.mask_logits).to_vec()
        };
        assert_eq!(run(&m), run(&back));
        let mut other = cfg.clone();
        other.num_queries = 4;
        assert!(Catr::load_matching(dir.path(), &other).is_err());
    }

    #[test]
    fn initialization_depends_only_on_seed() {
        let a = Catr::new(&tiny(), 3).unwrap();
        let b = Catr::new(&tiny(), 3).unwrap();
        let c = Catr::new(&tiny(), 4).unwrap();
        let flat = |m: &Catr| m.store.iter().flat_map(|(_, t)| t.data().to_vec()).collect::<Vec<_>>();
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }
}

//! Training loop, prediction and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::AvvsSample;
use crate::error::{CatrError, Result};
use crate::matching::{select_inference, training_loss, Selection};
use crate::metrics::{evaluate, EvalReport};
use crate::model::Catr;
use crate::nn::{Adam, AdamConfig, Graph, ParamId};
use crate::tensor::{write_tensor, DType, Tensor};

/// Loss components of one optimizer step, averaged over the batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub step: usize,
    pub dice: f64,
    pub focal: f64,
    pub reference: f64,
    pub total: f64,
}

pub const LOG_HEADER: &str = "step,dice,focal,ref,total";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        // {:?} prints the shortest representation that round-trips exactly
        let _ = writeln!(out, "{},{:?},{:?},{:?},{:?}", r.step, r.dice, r.focal, r.reference, r.total);
    }
    out
}

pub struct TrainOutcome {
    pub model: Catr,
    pub log: Vec<LogRow>,
}

/// Where training writes its artifacts. Everything is optional.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

fn check_sample(cfg: &RunConfig, s: &AvvsSample, i: usize) -> Result<()> {
    let m = &cfg.model;
    if s.video.shape() != [m.frames, m.height, m.width, 3] {
        return Err(CatrError::Validation(format!(
            "sample {i} video {:?} does not match the model ({} frames of {}x{})",
            s.video.shape(),
            m.frames,
            m.height,
            m.width
        )));
    }
    Ok(())
}

fn dump_batch(dir: &Path, step: usize, batch: &[&AvvsSample], losses: &[f64]) -> Result<PathBuf> {
    let dump = dir.join(format!("nan-step{step:06}"));
    fs::create_dir_all(&dump).map_err(|e| CatrError::io(&dump, e))?;
    for (i, s) in batch.iter().enumerate() {
        write_tensor(&dump.join(format!("b{i}_video.t")), &s.video, DType::F32)?;
        write_tensor(&dump.join(format!("b{i}_audio.t")), &s.audio, DType::F32)?;
        write_tensor(&dump.join(format!("b{i}_masks.t")), &s.gt.masks, DType::F32)?;
    }
    let specs: Vec<_> = batch.iter().map(|s| &s.spec).collect();
    let info = serde_json::json!({ "step": step, "losses": format!("{losses:?}"), "specs": specs });
    let path = dump.join("batch.json");
    fs::write(&path, serde_json::to_string_pretty(&info)?).map_err(|e| CatrError::io(&path, e))?;
    Ok(dump)
}

/// Trains a freshly initialized model on `data`.
///
/// `progress` is called after every step. Artifacts (loss log, periodic and
/// final checkpoints, NaN dumps) are written under `out.dir` when set.
pub fn train(
    cfg: &RunConfig,
    data: &[AvvsSample],
    out: &TrainOutputs,
    progress: &mut dyn FnMut(&LogRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CatrError::Validation("training set is empty".into()));
    }
    for (i, s) in data.iter().enumerate() {
        check_sample(cfg, s, i)?;
    }
    if let Some(dir) = &out.dir {
        fs::create_dir_all(dir).map_err(|e| CatrError::io(dir, e))?;
        cfg.save(&dir.join("config.json"))?;
    }
    let o = &cfg.optim;
    let mut model = Catr::new(&cfg.model, o.seed)?;
    let adam_cfg = AdamConfig { lr: o.lr, beta1: o.beta1, beta2: o.beta2, eps: o.eps, clip_norm: o.clip_norm };
    let mut adam = Adam::new(adam_cfg, &model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(o.seed ^ 0x5A5A_5A5A);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let targets: Vec<Tensor> = data.iter().map(|s| s.gt.targets(8)).collect::<Result<_>>()?;
    let mut log = Vec::with_capacity(o.steps);

    for step in 0..o.steps {
        let mut batch = Vec::with_capacity(o.batch_size);
        while batch.len() < o.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let mut row = LogRow { step, dice: 0.0, focal: 0.0, reference: 0.0, total: 0.0 };
        let mut grads: Vec<Vec<(ParamId, Vec<f64>)>> = Vec::with_capacity(batch.len());
        let mut totals = Vec::with_capacity(batch.len());
        for &i in &batch {
            let s = &data[i];
            let mut g = Graph::new(&model.store);
            let fwd = model.forward(&mut g, &s.video, &s.audio).and_then(|o| {
                training_loss(&mut g, o.mask_logits, o.reference_logits, &targets[i], &s.gt.visibility, &cfg.loss)
            });
            let failure = match &fwd {
                Ok(parts) => {
                    let total = g.value(parts.total)[0];
                    totals.push(total);
                    (!total.is_finite()).then(|| format!("loss is {total}"))
                }
                Err(CatrError::Numeric(msg)) => Some(msg.clone()),
                Err(_) => None,
            };
            if let Some(what) = failure {
                let samples: Vec<&AvvsSample> = batch.iter().map(|&j| &data[j]).collect();
                let where_ = match &out.dir {
                    Some(dir) => format!("; batch dumped to {}", dump_batch(dir, step, &samples, &totals)?.display()),
                    None => String::new(),
                };
                return Err(CatrError::Numeric(format!("{what} at step {step} (sample {i}){where_}")));
            }
            let parts = fwd?;
            let total = g.value(parts.total)[0];
            let gr = g.backward(parts.total)?;
            grads.push(g.param_grads(&gr));
            row.dice += parts.dice;
            row.focal += parts.focal;
            row.reference += parts.reference;
            row.total += total;
        }
        for gset in &grads {
            model.store.accumulate(gset)?;
        }
        let n = batch.len() as f64;
        adam.set_lr(cfg.lr_at(step));
        adam.step(&mut model.store, 1.0 / n)?;
        row.dice /= n;
        row.focal /= n;
        row.reference /= n;
        row.total /= n;
        log.push(row);
        progress(&row);
        if let Some(dir) = &out.dir {
            if o.checkpoint_every > 0 && (step + 1) % o.checkpoint_every == 0 && step + 1 < o.steps {
                model.save(&dir.join(format!("ckpt-{:06}", step + 1)))?;
                write_log(dir, &log)?;
            }
        }
    }
    if let Some(dir) = &out.dir {
        model.save(&dir.join("final"))?;
        write_log(dir, &log)?;
    }
    Ok(TrainOutcome { model, log })
}

fn write_log(dir: &Path, log: &[LogRow]) -> Result<()> {
    let path = dir.join("loss.csv");
    fs::write(&path, log_csv(log)).map_err(|e| CatrError::io(&path, e))
}

/// Model output for one video after query selection.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub selection: Selection,
    /// Stride-8 probabilities of every query, `[N, T, P]`.
    pub mask_probs: Tensor,
    /// `[N, T, 2]`.
    pub reference_probs: Tensor,
}

pub fn predict(model: &Catr, video: &Tensor, audio: &Tensor) -> Result<Prediction> {
    let mut g = Graph::new(&model.store);
    let out = model.forward(&mut g, video, audio)?;
    let probs = g.sigmoid(out.mask_logits);
    let mask_probs = g.tensor(probs);
    let reference_probs = g.tensor(out.reference_probs);
    let (h, w) = (model.cfg.height, model.cfg.width);
    let selection = select_inference(&mask_probs, &reference_probs, out.grid, h, w)?;
    Ok(Prediction { selection, mask_probs, reference_probs })
}

/// Predicts every sample and scores the selected masks.
pub fn evaluate_model(model: &Catr, samples: &[AvvsSample]) -> Result<EvalReport> {
    let preds: Vec<Tensor> = samples
        .iter()
        .map(|s| predict(model, &s.video, &s.audio).map(|p| p.selection.masks))
        .collect::<Result<_>>()?;
    let gts: Vec<Tensor> = samples.iter().map(|s| s.gt.masks.clone()).collect();
    evaluate(&preds, &gts)
}

/// RGB frame `[H, W, 3]` with `mask` (`[H, W]`) blended in `color` at `alpha`.
pub fn overlay(frame: &[f64], mask: &[f64], color: [f64; 3], alpha: f64) -> Vec<f64> {
    frame
        .chunks(3)
        .zip(mask)
        .flat_map(|(px, &m)| {
            let a = if m != 0.0 { alpha } else { 0.0 };
            (0..3).map(move |c| px[c] * (1.0 - a) + color[c] * a)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, sample_seeds, GenConfig};

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        let m = &mut cfg.model;
        m.channels = 8;
        m.heads = 2;
        m.gate_channels = 8;
        m.num_queries = 2;
        m.decoder_layers = 1;
        m.frames = 2;
        m.height = 16;
        m.width = 16;
        cfg.optim.steps = 3;
        cfg.optim.batch_size = 2;
        cfg.optim.lr = 1e-3;
        cfg
    }

    fn tiny_data(n: usize) -> Vec<AvvsSample> {
        let g = GenConfig { frames: 2, height: 16, width: 16, min_radius: 3.0, max_radius: 5.0, max_shapes: 2, ..GenConfig::default() };
        generate(&g, &sample_seeds(11, n)).unwrap()
    }

    #[test]
    fn one_step_lowers_the_loss_on_the_same_sample() {
        let mut cfg = tiny_cfg();
        cfg.optim.steps = 2;
        cfg.optim.batch_size = 1;
        let data = tiny_data(1);
        let out = train(&cfg, &data, &TrainOutputs::default(), &mut |_| {}).unwrap();
        assert!(out.log[1].total < out.log[0].total, "{:?}", out.log);
    }

    #[test]
    fn loss_log_is_bit_identical_across_runs() {
        let cfg = tiny_cfg();
        let data = tiny_data(3);
        let a = train(&cfg, &data, &TrainOutputs::default(), &mut |_| {}).unwrap();
        let b = train(&cfg, &data, &TrainOutputs::default(), &mut |_| {}).unwrap();
        assert_eq!(log_csv(&a.log), log_csv(&b.log));
        let mut other = cfg.clone();
        other.optim.seed = 1;
        let c = train(&other, &data, &TrainOutputs::default(), &mut |_| {}).unwrap();
        assert_ne!(log_csv(&a.log), log_csv(&c.log));
    }

    #[test]
    fn artifacts_and_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_cfg();
        cfg.optim.checkpoint_every = 2;
        let data = tiny_data(3);
        let out = train(&cfg, &data, &TrainOutputs { dir: Some(dir.path().to_path_buf()) }, &mut |_| {}).unwrap();
        assert!(dir.path().join("ckpt-000002").join("manifest.json").exists());
        let text = std::fs::read_to_string(dir.path().join("loss.csv")).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), LOG_HEADER);
        let loaded = Catr::load(&dir.path().join("final")).unwrap();
        let a = evaluate_model(&out.model, &data).unwrap();
        let b = evaluate_model(&loaded, &data).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mismatched_samples_are_rejected() {
        let mut cfg = tiny_cfg();
        cfg.model.frames = 3;
        let data = tiny_data(1);
        assert!(matches!(train(&cfg, &data, &TrainOutputs::default(), &mut |_| {}), Err(CatrError::Validation(_))));
    }

    #[test]
    fn non_finite_loss_aborts_with_dump() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_cfg();
        let mut data = tiny_data(2);
        data.iter_mut().for_each(|s| s.audio.data_mut()[0] = f64::NAN);
        let err = train(&cfg, &data, &TrainOutputs { dir: Some(dir.path().to_path_buf()) }, &mut |_| {});
        match err {
            Err(CatrError::Numeric(msg)) => assert!(msg.contains("dumped"), "{msg}"),
            Err(other) => panic!("expected a numeric error, got {other}"),
            Ok(_) => panic!("expected a numeric error"),
        }
        assert!(dir.path().join("nan-step000000").join("batch.json").exists());
    }

    #[test]
    fn predictions_have_full_resolution() {
        let cfg = tiny_cfg();
        let data = tiny_data(1);
        let model = Catr::new(&cfg.model, 0).unwrap();
        let p = predict(&model, &data[0].video, &data[0].audio).unwrap();
        assert_eq!(p.selection.masks.shape(), &[2, 16, 16]);
        assert!(p.selection.masks.data().iter().all(|&x| x == 0.0 || x == 1.0));
        let again = predict(&model, &data[0].video, &data[0].audio).unwrap();
        assert_eq!(p.selection, again.selection);
    }

    #[test]
    fn overlay_blends_only_masked_pixels() {
        let frame = vec![0.0, 0.5, 1.0, 0.2, 0.2, 0.2];
        let out = overlay(&frame, &[1.0, 0.0], [1.0, 0.0, 0.0], 0.5);
        assert_eq!(out, vec![0.5, 0.25, 0.5, 0.2, 0.2, 0.2]);
    }
}

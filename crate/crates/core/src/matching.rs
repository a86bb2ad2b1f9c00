//! Sequence matching, training loss and inference-time selection.
//!
//! Each query proposes a whole mask sequence. Training matches the single
//! ground-truth sequence to the cheapest query, supervises that query's masks
//! with Dice and focal terms, and supervises the reference scores of every
//! query (the matched one toward the per-frame visibility, the rest toward 0).

use crate::autodiff::{Tape, Var};
use crate::config::LossConfig;
use crate::error::{CatrError, Result};
use crate::tensor::Tensor;

/// Dice smoothing term.
pub const DICE_EPS: f64 = 1.0;

/// Ground truth for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Full-resolution binary masks `[T, H, W]`.
    pub masks: Tensor,
    /// Per-frame "sounding and visible" flag.
    pub visibility: Vec<bool>,
}

impl GroundTruth {
    pub fn new(masks: Tensor, visibility: Vec<bool>) -> Result<Self> {
        let s = masks.shape();
        if s.len() != 3 || s[0] != visibility.len() {
            return Err(CatrError::Dimension(format!(
                "ground truth masks {s:?} with {} visibility flags",
                visibility.len()
            )));
        }
        let per = s[1] * s[2];
        for (t, &vis) in visibility.iter().enumerate() {
            let frame = &masks.data()[t * per..(t + 1) * per];
            if frame.iter().any(|&x| x != 0.0 && x != 1.0) {
                return Err(CatrError::Validation(format!("ground truth frame {t} is not binary")));
            }
            let any = frame.contains(&1.0);
            if any != vis {
                return Err(CatrError::Validation(format!(
                    "ground truth frame {t}: visibility {vis} but mask is {}",
                    if any { "non-empty" } else { "empty" }
                )));
            }
        }
        Ok(Self { masks, visibility })
    }

    pub fn frames(&self) -> usize {
        self.visibility.len()
    }

    /// Fraction of each `stride × stride` cell covered by the mask, `[T, P]`.
    pub fn targets(&self, stride: usize) -> Result<Tensor> {
        area_fraction(&self.masks, stride)
    }

    /// Visibility as 0/1 reals.
    pub fn visibility_f64(&self) -> Vec<f64> {
        self.visibility.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect()
    }
}

/// Downsamples `[T, H, W]` masks to `[T, (H/s)·(W/s)]` cell coverage.
pub fn area_fraction(masks: &Tensor, stride: usize) -> Result<Tensor> {
    let s = masks.shape();
    if s.len() != 3 || stride == 0 || !s[1].is_multiple_of(stride) || !s[2].is_multiple_of(stride) {
        return Err(CatrError::Dimension(format!("cannot pool masks {s:?} by {stride}")));
    }
    let (t, h, w) = (s[0], s[1] / stride, s[2] / stride);
    let norm = (stride * stride) as f64;
    Ok(Tensor::from_fn(&[t, h * w], |i| {
        let (ti, cell) = (i / (h * w), i % (h * w));
        let (cy, cx) = (cell / w, cell % w);
        let mut sum = 0.0;
        for y in cy * stride..(cy + 1) * stride {
            for x in cx * stride..(cx + 1) * stride {
                sum += masks.at(&[ti, y, x]);
            }
        }
        sum / norm
    }))
}

/// Soft Dice over a whole sequence: `(2 Σ p·g + ε) / (Σ p + Σ g + ε)`.
pub fn dice_coeff(pred: &[f64], gt: &[f64], eps: f64) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(CatrError::shapes("dice_coeff", &[pred.len()], &[gt.len()]));
    }
    let inter: f64 = pred.iter().zip(gt).map(|(p, g)| p * g).sum();
    let total: f64 = pred.iter().sum::<f64>() + gt.iter().sum::<f64>();
    Ok((2.0 * inter + eps) / (total + eps))
}

/// `1 − dice` on the tape; `probs` and `target` share a shape.
pub fn dice_loss(t: &mut Tape, probs: Var, target: Var) -> Result<Var> {
    let pg = t.mul(probs, target)?;
    let inter = t.sum_all(pg);
    let sp = t.sum_all(probs);
    let sg = t.sum_all(target);
    let num = t.scale(inter, 2.0);
    let num = t.shift(num, DICE_EPS);
    let den = t.add(sp, sg)?;
    let den = t.shift(den, DICE_EPS);
    // num / den = exp(ln num − ln den); both are ≥ ε > 0
    let ln_num = t.ln(num);
    let ln_den = t.ln(den);
    let diff = t.sub(ln_num, ln_den)?;
    let dice = t.exp(diff);
    let neg = t.scale(dice, -1.0);
    Ok(t.shift(neg, 1.0))
}

/// Mean focal loss over all elements, from logits and (soft) targets:
/// `−α g (1−p)^γ ln p − (1−α)(1−g) p^γ ln(1−p)`.
pub fn focal_loss(t: &mut Tape, logits: Var, target: Var, gamma: f64, alpha: f64) -> Result<Var> {
    let log_p = t.log_sigmoid(logits);
    let neg_logits = t.scale(logits, -1.0);
    let log_q = t.log_sigmoid(neg_logits); // ln(1 − p)
    // (1 − p)^γ = exp(γ ln(1 − p)), and likewise for p^γ
    let gq = t.scale(log_q, gamma);
    let wq = t.exp(gq);
    let gp = t.scale(log_p, gamma);
    let wp = t.exp(gp);
    let pos = t.mul(wq, log_p)?;
    let pos = t.mul(pos, target)?;
    let pos = t.scale(pos, -alpha);
    let one_minus = t.scale(target, -1.0);
    let one_minus = t.shift(one_minus, 1.0);
    let neg = t.mul(wp, log_q)?;
    let neg = t.mul(neg, one_minus)?;
    let neg = t.scale(neg, -(1.0 - alpha));
    let all = t.add(pos, neg)?;
    Ok(t.mean_all(all))
}

/// Focal loss of a single probability against a binary label, evaluated
/// directly; used for reporting and as a reference.
pub fn focal_scalar(p: f64, g: f64, gamma: f64, alpha: f64) -> f64 {
    -alpha * g * (1.0 - p).powf(gamma) * p.ln() - (1.0 - alpha) * (1.0 - g) * p.powf(gamma) * (1.0 - p).ln()
}

/// Result of matching the ground truth against `N` query proposals.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    pub pos_index: usize,
    pub costs: Vec<f64>,
}

/// Index of the smallest value; ties go to the lowest index. NaN never wins.
pub fn argmin(xs: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in xs.iter().enumerate() {
        match best {
            _ if x.is_nan() => {}
            None => best = Some(i),
            Some(b) if x < xs[b] => best = Some(i),
            _ => {}
        }
    }
    best
}

/// Index of the largest value; ties go to the lowest index. NaN never wins.
pub fn argmax(xs: &[f64]) -> Option<usize> {
    let neg: Vec<f64> = xs.iter().map(|x| -x).collect();
    argmin(&neg)
}

/// Mean over frames of `−ln R̂_t[R_t]`.
pub fn reference_ce(probs: &[[f64; 2]], visibility: &[bool]) -> f64 {
    let n = visibility.len() as f64;
    probs
        .iter()
        .zip(visibility)
        .map(|(p, &v)| -(p[usize::from(v)].max(f64::MIN_POSITIVE)).ln())
        .sum::<f64>()
        / n
}

/// `mask_probs`: `[N, T, P]`; `ref_probs`: `[N, T, 2]`; `target`: `[T, P]`.
pub fn match_queries(mask_probs: &Tensor, ref_probs: &Tensor, target: &Tensor, visibility: &[bool]) -> Result<MatchResult> {
    let ms = mask_probs.shape();
    let rs = ref_probs.shape();
    let t = visibility.len();
    if ms.len() != 3 || ms[0] == 0 || ms[1] != t || target.shape() != [ms[1], ms[2]] || rs != [ms[0], t, 2] {
        return Err(CatrError::Dimension(format!(
            "match: masks {ms:?}, reference {rs:?}, target {:?}, {t} frames",
            target.shape()
        )));
    }
    let per = t * ms[2];
    let costs: Vec<f64> = (0..ms[0])
        .map(|i| {
            let dice = dice_coeff(&mask_probs.data()[i * per..(i + 1) * per], target.data(), DICE_EPS)?;
            let r: Vec<[f64; 2]> = (0..t).map(|f| [ref_probs.at(&[i, f, 0]), ref_probs.at(&[i, f, 1])]).collect();
            Ok((1.0 - dice) + reference_ce(&r, visibility))
        })
        .collect::<Result<_>>()?;
    let pos_index = argmin(&costs).ok_or_else(|| CatrError::Numeric("all matching costs are NaN".into()))?;
    Ok(MatchResult { pos_index, costs })
}

/// Loss terms (already weighted into `total`) and the matched query.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: Var,
    pub dice: f64,
    pub focal: f64,
    pub reference: f64,
    pub pos_index: usize,
}

/// Matches on current values, then builds the weighted loss on the tape.
///
/// `mask_logits`: `[N, T, P]`; `ref_logits`: `[N, T, 2]`; `target`: `[T, P]`.
pub fn training_loss(
    t: &mut Tape,
    mask_logits: Var,
    ref_logits: Var,
    target: &Tensor,
    visibility: &[bool],
    cfg: &LossConfig,
) -> Result<LossParts> {
    let probs = t.sigmoid(mask_logits);
    let ref_probs = t.softmax(ref_logits, 2)?;
    let m = match_queries(&t.tensor(probs), &t.tensor(ref_probs), target, visibility)?;
    let i = m.pos_index;
    let (n, frames) = (t.shape(mask_logits)[0], visibility.len());

    let logit_i = t.slice(mask_logits, 0, i, 1)?;
    let prob_i = t.slice(probs, 0, i, 1)?;
    let tgt = t.constant(&target.clone().reshape(&[1, target.shape()[0], target.shape()[1]])?);
    let dice = dice_loss(t, prob_i, tgt)?;
    let focal = focal_loss(t, logit_i, tgt, cfg.gamma, cfg.alpha)?;

    // one-hot reference targets: matched query follows visibility, others 0
    let mut onehot = Tensor::zeros(&[n, frames, 2]);
    for q in 0..n {
        for f in 0..frames {
            let cls = usize::from(q == i && visibility[f]);
            onehot.set(&[q, f, cls], 1.0);
        }
    }
    let oh = t.constant(&onehot);
    let logp = t.log_softmax(ref_logits, 2)?;
    let picked = t.mul(logp, oh)?;
    let picked = t.sum_all(picked);
    let reference = t.scale(picked, -1.0 / (n * frames) as f64);

    let wd = t.scale(dice, cfg.lambda_dice);
    let wf = t.scale(focal, cfg.lambda_focal);
    let wr = t.scale(reference, cfg.lambda_ref);
    let total = t.add(wd, wf)?;
    let total = t.add(total, wr)?;
    Ok(LossParts {
        total,
        dice: t.value(dice)[0],
        focal: t.value(focal)[0],
        reference: t.value(reference)[0],
        pos_index: i,
    })
}

/// Per-query score: mean over frames of `R̂[..., 1]`.
pub fn query_scores(ref_probs: &Tensor) -> Result<Vec<f64>> {
    let s = ref_probs.shape();
    if s.len() != 3 || s[2] != 2 || s[0] == 0 {
        return Err(CatrError::Dimension(format!("reference probabilities must be [N, T, 2], got {s:?}")));
    }
    Ok((0..s[0]).map(|i| (0..s[1]).map(|f| ref_probs.at(&[i, f, 1])).sum::<f64>() / s[1] as f64).collect())
}

/// Index of the query with the highest score (lowest index on ties).
pub fn select_query(ref_probs: &Tensor) -> Result<usize> {
    argmax(&query_scores(ref_probs)?).ok_or_else(|| CatrError::Numeric("all query scores are NaN".into()))
}

/// Bilinear upsampling of `[T, h, w]` to `[T, H, W]` with half-pixel centers
/// and edge clamping.
pub fn upsample_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 3 || height == 0 || width == 0 {
        return Err(CatrError::Dimension(format!("cannot upsample {s:?}")));
    }
    let (t, h, w) = (s[0], s[1], s[2]);
    let coord = |o: usize, out: usize, inp: usize| -> (usize, usize, f64) {
        let src = ((o as f64 + 0.5) * inp as f64 / out as f64 - 0.5).clamp(0.0, (inp - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(inp - 1);
        (lo, hi, src - lo as f64)
    };
    Ok(Tensor::from_fn(&[t, height, width], |i| {
        let (ti, rest) = (i / (height * width), i % (height * width));
        let (y0, y1, fy) = coord(rest / width, height, h);
        let (x0, x1, fx) = coord(rest % width, width, w);
        let top = x.at(&[ti, y0, x0]) * (1.0 - fx) + x.at(&[ti, y0, x1]) * fx;
        let bot = x.at(&[ti, y1, x0]) * (1.0 - fx) + x.at(&[ti, y1, x1]) * fx;
        top * (1.0 - fy) + bot * fy
    }))
}

/// Final prediction for one video.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub scores: Vec<f64>,
    /// Binary masks `[T, H, W]`.
    pub masks: Tensor,
}

/// Picks the best-scoring query, upsamples its probabilities from the
/// `grid` to `height × width` and thresholds at 0.5.
pub fn select_inference(
    mask_probs: &Tensor,
    ref_probs: &Tensor,
    grid: (usize, usize),
    height: usize,
    width: usize,
) -> Result<Selection> {
    let scores = query_scores(ref_probs)?;
    let index = argmax(&scores).ok_or_else(|| CatrError::Numeric("all query scores are NaN".into()))?;
    let s = mask_probs.shape();
    if s.len() != 3 || s[0] != scores.len() || s[2] != grid.0 * grid.1 {
        return Err(CatrError::Dimension(format!("mask probabilities {s:?} do not match grid {grid:?}")));
    }
    let per = s[1] * s[2];
    let chosen = Tensor::new(&[s[1], grid.0, grid.1], mask_probs.data()[index * per..(index + 1) * per].to_vec())?;
    let up = upsample_bilinear(&chosen, height, width)?;
    let masks = Tensor::from_fn(up.shape(), |i| if up.data()[i] > 0.5 { 1.0 } else { 0.0 });
    Ok(Selection { index, scores, masks })
}

//! Region Jaccard and boundary F-score, per frame, per video and per dataset.

use serde::{Deserialize, Serialize};

use crate::error::{CatrError, Result};
use crate::tensor::Tensor;

/// Borrowed binary mask, row-major `height × width`, nonzero = foreground.
#[derive(Clone, Copy, Debug)]
pub struct Mask<'a> {
    pub data: &'a [f64],
    pub height: usize,
    pub width: usize,
}

impl<'a> Mask<'a> {
    pub fn new(data: &'a [f64], height: usize, width: usize) -> Result<Self> {
        if data.len() != height * width {
            return Err(CatrError::Dimension(format!("mask of {} values is not {height}x{width}", data.len())));
        }
        Ok(Self { data, height, width })
    }

    fn on(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x] != 0.0
    }
}

fn same_shape(a: &Mask<'_>, b: &Mask<'_>, op: &str) -> Result<()> {
    if (a.height, a.width) != (b.height, b.width) {
        return Err(CatrError::shapes(op, &[a.height, a.width], &[b.height, b.width]));
    }
    Ok(())
}

/// `|pred ∩ gt| / |pred ∪ gt|`; two empty masks score 1.
pub fn jaccard(pred: Mask<'_>, gt: Mask<'_>) -> Result<f64> {
    same_shape(&pred, &gt, "jaccard")?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (p, g) in pred.data.iter().zip(gt.data) {
        let (p, g) = (*p != 0.0, *g != 0.0);
        inter += usize::from(p && g);
        union += usize::from(p || g);
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with at least one 4-neighbour that is background or
/// outside the image.
pub fn boundary(m: Mask<'_>) -> Vec<bool> {
    let (h, w) = (m.height, m.width);
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !m.on(y, x) {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            out[y * w + x] = edge || !m.on(y - 1, x) || !m.on(y + 1, x) || !m.on(y, x - 1) || !m.on(y, x + 1);
        }
    }
    out
}

/// Default tolerance: 0.8% of the image diagonal, at least one pixel.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    let diag = ((height * height + width * width) as f64).sqrt();
    ((0.008 * diag).round() as usize).max(1)
}

/// Fraction of `from` boundary pixels within Chebyshev distance `tol` of a
/// `to` boundary pixel.
fn matched_fraction(from: &[bool], to: &[bool], h: usize, w: usize, tol: usize) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for y in 0..h {
        for x in 0..w {
            if !from[y * w + x] {
                continue;
            }
            total += 1;
            let (y0, y1) = (y.saturating_sub(tol), (y + tol).min(h - 1));
            let (x0, x1) = (x.saturating_sub(tol), (x + tol).min(w - 1));
            if (y0..=y1).any(|yy| (x0..=x1).any(|xx| to[yy * w + xx])) {
                hits += 1;
            }
        }
    }
    hits as f64 / total as f64
}

/// Boundary F-measure with tolerance `tol` pixels (Chebyshev). Both
/// boundaries empty scores 1; exactly one empty scores 0.
pub fn boundary_f(pred: Mask<'_>, gt: Mask<'_>, tol: usize) -> Result<f64> {
    same_shape(&pred, &gt, "boundary_f")?;
    let (bp, bg) = (boundary(pred), boundary(gt));
    let (np, ng) = (bp.contains(&true), bg.contains(&true));
    match (np, ng) {
        (false, false) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let (h, w) = (pred.height, pred.width);
    let precision = matched_fraction(&bp, &bg, h, w, tol);
    let recall = matched_fraction(&bg, &bp, h, w, tol);
    Ok(if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoScore {
    pub jaccard: f64,
    pub boundary_f: f64,
    pub frame_jaccard: Vec<f64>,
    pub frame_boundary_f: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub m_j: f64,
    pub m_f: f64,
    pub tolerance: usize,
    pub videos: Vec<VideoScore>,
}

/// Scores one video; `pred` and `gt` are `[T, H, W]` binary masks.
pub fn score_video(pred: &Tensor, gt: &Tensor, tol: usize) -> Result<VideoScore> {
    if pred.shape() != gt.shape() || pred.rank() != 3 {
        return Err(CatrError::shapes("score_video", pred.shape(), gt.shape()));
    }
    let (t, h, w) = (pred.shape()[0], pred.shape()[1], pred.shape()[2]);
    let per = h * w;
    let mut fj = Vec::with_capacity(t);
    let mut ff = Vec::with_capacity(t);
    for f in 0..t {
        let p = Mask::new(&pred.data()[f * per..(f + 1) * per], h, w)?;
        let g = Mask::new(&gt.data()[f * per..(f + 1) * per], h, w)?;
        fj.push(jaccard(p, g)?);
        ff.push(boundary_f(p, g, tol)?);
    }
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len() as f64;
    Ok(VideoScore { jaccard: mean(&fj), boundary_f: mean(&ff), frame_jaccard: fj, frame_boundary_f: ff })
}

/// Per-frame metrics averaged per video, then over videos.
pub fn evaluate(preds: &[Tensor], gts: &[Tensor]) -> Result<EvalReport> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(CatrError::Validation(format!(
            "evaluate: {} predictions for {} ground-truth videos",
            preds.len(),
            gts.len()
        )));
    }
    let s = gts[0].shape();
    if s.len() != 3 {
        return Err(CatrError::Dimension(format!("ground truth must be [T, H, W], got {s:?}")));
    }
    let tol = default_tolerance(s[1], s[2]);
    let videos: Vec<VideoScore> = preds.iter().zip(gts).map(|(p, g)| score_video(p, g, tol)).collect::<Result<_>>()?;
    let n = videos.len() as f64;
    Ok(EvalReport {
        m_j: videos.iter().map(|v| v.jaccard).sum::<f64>() / n,
        m_f: videos.iter().map(|v| v.boundary_f).sum::<f64>() / n,
        tolerance: tol,
        videos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(data: &[f64], h: usize, w: usize) -> Mask<'_> {
        Mask::new(data, h, w).unwrap()
    }

    #[test]
    fn jaccard_examples() {
        let a = [1.0, 1.0, 0.0, 0.0];
        let b = [1.0, 0.0, 0.0, 0.0];
        assert_eq!(jaccard(m(&a, 2, 2), m(&a, 2, 2)).unwrap(), 1.0);
        assert_eq!(jaccard(m(&a, 2, 2), m(&[0.0, 0.0, 1.0, 1.0], 2, 2)).unwrap(), 0.0);
        assert_eq!(jaccard(m(&a, 2, 2), m(&b, 2, 2)).unwrap(), 0.5);
        assert_eq!(jaccard(m(&[0.0; 4], 2, 2), m(&[0.0; 4], 2, 2)).unwrap(), 1.0);
        assert!(jaccard(m(&a, 2, 2), m(&a, 1, 4)).is_err());
    }

    fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Vec<f64> {
        (0..h * w).map(|i| if (y0..y0 + side).contains(&(i / w)) && (x0..x0 + side).contains(&(i % w)) { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn boundary_f_examples() {
        let a = square(4, 4, 0, 0, 2);
        let b = square(4, 4, 0, 1, 2);
        assert_eq!(boundary_f(m(&a, 4, 4), m(&a, 4, 4), 1).unwrap(), 1.0);
        assert_eq!(boundary_f(m(&a, 4, 4), m(&[0.0; 16], 4, 4), 1).unwrap(), 0.0);
        assert_eq!(boundary_f(m(&[0.0; 16], 4, 4), m(&[0.0; 16], 4, 4), 1).unwrap(), 1.0);
        assert_eq!(boundary_f(m(&a, 4, 4), m(&b, 4, 4), 1).unwrap(), 1.0);
        // tol 0: every pixel of a 2×2 square is boundary; two columns overlap
        let f0 = boundary_f(m(&a, 4, 4), m(&b, 4, 4), 0).unwrap();
        assert!((f0 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn boundary_of_a_filled_square_is_its_ring() {
        let a = square(6, 6, 1, 1, 4);
        let b = boundary(m(&a, 6, 6));
        assert_eq!(b.iter().filter(|&&x| x).count(), 12);
        assert!(!b[2 * 6 + 2] && !b[3 * 6 + 3]);
    }

    #[test]
    fn tolerance_follows_the_diagonal() {
        assert_eq!(default_tolerance(64, 64), 1);
        assert_eq!(default_tolerance(224, 224), 3);
        assert_eq!(default_tolerance(4, 4), 1);
    }

    #[test]
    fn evaluate_aggregates_per_video_then_overall() {
        let gt = Tensor::new(&[2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let perfect = evaluate(std::slice::from_ref(&gt), std::slice::from_ref(&gt)).unwrap();
        assert_eq!((perfect.m_j, perfect.m_f), (1.0, 1.0));
        let empty = Tensor::zeros(&[2, 2, 2]);
        let r = evaluate(std::slice::from_ref(&empty), std::slice::from_ref(&gt)).unwrap();
        assert_eq!(r.m_j, 0.0);
        let half = Tensor::new(&[2, 2, 2], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let r = evaluate(&[gt.clone(), half, empty], &[gt.clone(), gt.clone(), gt.clone()]).unwrap();
        // per-video J: 1, (1 + 0.5)/2, 0
        assert!((r.m_j - (1.0 + 0.75 + 0.0) / 3.0).abs() < 1e-12);
        assert!(evaluate(std::slice::from_ref(&gt), &[]).is_err());
    }

    proptest! {
        #[test]
        fn metrics_are_symmetric_and_bounded(a in proptest::collection::vec(0u8..2, 36), b in proptest::collection::vec(0u8..2, 36)) {
            let a: Vec<f64> = a.into_iter().map(f64::from).collect();
            let b: Vec<f64> = b.into_iter().map(f64::from).collect();
            let (ma, mb) = (m(&a, 6, 6), m(&b, 6, 6));
            let j = jaccard(ma, mb).unwrap();
            prop_assert_eq!(j, jaccard(mb, ma).unwrap());
            prop_assert!((0.0..=1.0).contains(&j));
            let f = boundary_f(ma, mb, 1).unwrap();
            prop_assert_eq!(f, boundary_f(mb, ma, 1).unwrap());
            prop_assert!((0.0..=1.0).contains(&f));
            if a.contains(&1.0) {
                prop_assert_eq!(jaccard(ma, ma).unwrap(), 1.0);
            }
        }
    }
}

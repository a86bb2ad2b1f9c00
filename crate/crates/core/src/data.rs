//! Synthetic audio-visual scenes: moving shapes, one audio signature per shape
//! kind, and pixel-exact masks of whatever is sounding in each frame.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{CatrError, Result};
use crate::features::AUDIO_DIM;
use crate::matching::GroundTruth;
use crate::tensor::{read_tensor, write_tensor, DType, Tensor};

pub const DATASET_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
/// Seed of the fixed kind-signature basis.
const SIGNATURE_SEED: u64 = 0xA0D1_0000_5EED;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Circle,
    Square,
    Triangle,
}

impl Kind {
    pub const ALL: [Kind; 3] = [Kind::Circle, Kind::Square, Kind::Triangle];

    pub fn index(self) -> usize {
        self as usize
    }

    fn base_color(self) -> [f64; 3] {
        match self {
            Kind::Circle => [0.85, 0.25, 0.2],
            Kind::Square => [0.25, 0.8, 0.3],
            Kind::Triangle => [0.25, 0.4, 0.9],
        }
    }
}

/// Orthonormal audio signatures, one row per kind, `[3, 128]`.
pub fn signatures() -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(SIGNATURE_SEED);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rows: Vec<Vec<f64>> = Vec::new();
    while rows.len() < Kind::ALL.len() {
        let mut v: Vec<f64> = (0..AUDIO_DIM).map(|_| normal.sample(&mut rng)).collect();
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::new(&[Kind::ALL.len(), AUDIO_DIM], rows.concat()).expect("signature shape")
}

/// One shape with linear motion: center at frame `t` is `start + t·velocity`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeSpec {
    pub kind: Kind,
    pub color: [f64; 3],
    pub start: [f64; 2],
    pub velocity: [f64; 2],
    pub radius: f64,
    /// Per-frame sounding flag.
    pub sounding: Vec<bool>,
}

impl ShapeSpec {
    pub fn center(&self, t: usize) -> (f64, f64) {
        (self.start[0] + t as f64 * self.velocity[0], self.start[1] + t as f64 * self.velocity[1])
    }

    /// Whether pixel `(x, y)` (integer coordinates, sampled at the pixel
    /// center) lies inside the shape at frame `t`.
    pub fn contains(&self, t: usize, x: usize, y: usize) -> bool {
        let (cx, cy) = self.center(t);
        let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
        let r = self.radius;
        match self.kind {
            Kind::Circle => px * px + py * py <= r * r,
            Kind::Square => px.abs() <= 0.85 * r && py.abs() <= 0.85 * r,
            Kind::Triangle => {
                // upright triangle inscribed in the circle of radius r
                let h = 0.866_025_403_784_438_6 * r;
                let v = [(0.0, -r), (-h, 0.5 * r), (h, 0.5 * r)];
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (py - a.1) - (b.1 - a.1) * (px - a.0);
                let (d0, d1, d2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0) || (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0)
            }
        }
    }

    /// Radius of a circle that encloses the shape.
    pub fn extent(&self) -> f64 {
        match self.kind {
            Kind::Square => 0.85 * std::f64::consts::SQRT_2 * self.radius,
            _ => self.radius,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub background: [f64; 3],
    /// Shapes in z-order: later shapes are drawn on top.
    pub shapes: Vec<ShapeSpec>,
    /// Standard deviation of the additive audio noise.
    pub noise: f64,
    /// Seed of the audio noise.
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.height == 0 || self.width == 0 {
            return Err(CatrError::Validation("scene dimensions must be positive".into()));
        }
        if self.shapes.is_empty() {
            return Err(CatrError::Validation("scene has no shapes".into()));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(CatrError::Validation(format!("audio noise {} must be non-negative", self.noise)));
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if s.sounding.len() != self.frames {
                return Err(CatrError::Validation(format!(
                    "shape {i} has {} sounding flags for {} frames",
                    s.sounding.len(),
                    self.frames
                )));
            }
            if !(s.radius.is_finite() && s.radius > 0.0) {
                return Err(CatrError::Validation(format!("shape {i} has radius {}", s.radius)));
            }
            for t in 0..self.frames {
                let (cx, cy) = s.center(t);
                let inside = (0.0..self.width as f64).contains(&cx) && (0.0..self.height as f64).contains(&cy);
                if !inside {
                    return Err(CatrError::Validation(format!(
                        "shape {i} center ({cx:.1}, {cy:.1}) leaves the {}x{} canvas at frame {t}",
                        self.width, self.height
                    )));
                }
            }
        }
        if !self.shapes.iter().any(|s| s.sounding.iter().any(|&x| x)) {
            return Err(CatrError::Validation("no shape sounds in any frame".into()));
        }
        Ok(())
    }

    /// Kinds sounding at frame `t`, deduplicated and in kind order.
    pub fn sounding_kinds(&self, t: usize) -> Vec<Kind> {
        Kind::ALL
            .into_iter()
            .filter(|k| self.shapes.iter().any(|s| s.kind == *k && s.sounding[t]))
            .collect()
    }
}

/// One rendered video with its audio and ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct AvvsSample {
    pub spec: SceneSpec,
    /// `[T, H, W, 3]` in [0, 1].
    pub video: Tensor,
    /// `[T, 128]`.
    pub audio: Tensor,
    pub gt: GroundTruth,
}

/// Rounds through f32 so samples survive a single-precision round trip.
fn f32_exact(x: f64) -> f64 {
    x as f32 as f64
}

/// Rasterizes a scene. The result depends only on the spec.
pub fn render(spec: &SceneSpec) -> Result<AvvsSample> {
    spec.validate()?;
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let mut video = Tensor::zeros(&[t, h, w, 3]);
    let mut masks = Tensor::zeros(&[t, h, w]);
    let data = video.data_mut();
    for ti in 0..t {
        for y in 0..h {
            for x in 0..w {
                let mut color = spec.background;
                for s in &spec.shapes {
                    if s.contains(ti, x, y) {
                        color = s.color;
                    }
                }
                let o = ((ti * h + y) * w + x) * 3;
                for c in 0..3 {
                    data[o + c] = f32_exact(color[c].clamp(0.0, 1.0));
                }
            }
        }
    }
    let mdata = masks.data_mut();
    for ti in 0..t {
        for s in spec.shapes.iter().filter(|s| s.sounding[ti]) {
            for y in 0..h {
                for x in 0..w {
                    if s.contains(ti, x, y) {
                        mdata[(ti * h + y) * w + x] = 1.0;
                    }
                }
            }
        }
    }
    let visibility = (0..t).map(|ti| mdata[ti * h * w..(ti + 1) * h * w].contains(&1.0)).collect();

    let sig = signatures();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut audio = Tensor::zeros(&[t, AUDIO_DIM]);
    for ti in 0..t {
        let kinds = spec.sounding_kinds(ti);
        // identical kinds share one signature, so the mean over sounding
        // shapes of one kind is that kind's signature
        let shapes: Vec<Kind> = spec.shapes.iter().filter(|s| s.sounding[ti]).map(|s| s.kind).collect();
        debug_assert!(kinds.iter().all(|k| shapes.contains(k)));
        for d in 0..AUDIO_DIM {
            let mean = if shapes.is_empty() {
                0.0
            } else {
                shapes.iter().map(|k| sig.at(&[k.index(), d])).sum::<f64>() / shapes.len() as f64
            };
            audio.set(&[ti, d], f32_exact(mean + spec.noise * normal.sample(&mut rng)));
        }
    }
    Ok(AvvsSample { spec: spec.clone(), video, audio, gt: GroundTruth::new(masks, visibility)? })
}

/// Knobs of the random scene generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub max_shapes: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    pub max_speed: f64,
    pub noise: f64,
    /// Probability that a second kind sounds alongside the main one.
    pub multi_source: f64,
    /// Probability that the sounding kind switches partway through.
    pub switch_prob: f64,
    /// Per-frame probability of silence.
    pub silent_prob: f64,
    pub color_jitter: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            frames: 5,
            height: 64,
            width: 64,
            max_shapes: 3,
            min_radius: 10.0,
            max_radius: 18.0,
            max_speed: 2.0,
            noise: 0.05,
            multi_source: 0.3,
            switch_prob: 0.3,
            silent_prob: 0.1,
            color_jitter: 0.08,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.frames > 0
            && self.max_shapes >= 1
            && self.max_shapes <= Kind::ALL.len()
            && self.min_radius > 0.0
            && self.min_radius <= self.max_radius
            && 2.0 * self.max_radius < self.height.min(self.width) as f64
            && self.max_speed >= 0.0
            && self.noise >= 0.0
            && [self.multi_source, self.switch_prob, self.silent_prob].iter().all(|p| (0.0..=1.0).contains(p));
        if ok {
            Ok(())
        } else {
            Err(CatrError::Validation(format!("invalid generator settings {self:?}")))
        }
    }
}

/// Draws shape geometry that stays fully inside the canvas and never overlaps
/// another shape in any frame.
fn place_shapes<R: Rng>(cfg: &GenConfig, kinds: &[Kind], rng: &mut R) -> Option<Vec<ShapeSpec>> {
    let mut shapes: Vec<ShapeSpec> = Vec::new();
    for &kind in kinds {
        let mut placed = false;
        for _ in 0..200 {
            let radius = rng.random_range(cfg.min_radius..=cfg.max_radius);
            let base = kind.base_color();
            let color = base.map(|c| (c + rng.random_range(-cfg.color_jitter..=cfg.color_jitter)).clamp(0.0, 1.0));
            let mut s = ShapeSpec {
                kind,
                color,
                start: [0.0, 0.0],
                velocity: [
                    rng.random_range(-cfg.max_speed..=cfg.max_speed),
                    rng.random_range(-cfg.max_speed..=cfg.max_speed),
                ],
                radius,
                sounding: vec![false; cfg.frames],
            };
            let ext = s.extent();
            let last = (cfg.frames - 1) as f64;
            let span = |size: usize, v: f64| -> Option<(f64, f64)> {
                // start range keeping ext ≤ center ≤ size − ext for all frames
                let lo = ext - (v * last).min(0.0);
                let hi = size as f64 - ext - (v * last).max(0.0);
                (lo < hi).then_some((lo, hi))
            };
            let (Some(xr), Some(yr)) = (span(cfg.width, s.velocity[0]), span(cfg.height, s.velocity[1])) else {
                continue;
            };
            s.start = [rng.random_range(xr.0..xr.1), rng.random_range(yr.0..yr.1)];
            let clear = shapes.iter().all(|o| {
                (0..cfg.frames).all(|t| {
                    let (a, b) = (s.center(t), o.center(t));
                    let d = ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt();
                    d > s.extent() + o.extent() + 1.0
                })
            });
            if clear {
                shapes.push(s);
                placed = true;
                break;
            }
        }
        if !placed {
            return None;
        }
    }
    Some(shapes)
}

/// A random scene drawn from `seed`.
pub fn random_scene(cfg: &GenConfig, seed: u64) -> Result<SceneSpec> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = cfg.frames;
    loop {
        let k = rng.random_range(1..=cfg.max_shapes);
        let mut kinds = Kind::ALL.to_vec();
        for i in (1..kinds.len()).rev() {
            kinds.swap(i, rng.random_range(0..=i));
        }
        kinds.truncate(k);
        let Some(mut shapes) = place_shapes(cfg, &kinds, &mut rng) else { continue };

        let main = rng.random_range(0..k);
        let mut sounding = vec![vec![false; t]; k];
        let switch = if k >= 2 && t >= 2 && rng.random::<f64>() < cfg.switch_prob {
            let other = (main + rng.random_range(1..k)) % k;
            Some((rng.random_range(1..t), other))
        } else {
            None
        };
        for f in 0..t {
            let who = match switch {
                Some((at, other)) if f >= at => other,
                _ => main,
            };
            sounding[who][f] = true;
        }
        if k >= 2 && rng.random::<f64>() < cfg.multi_source {
            let extra = (main + rng.random_range(1..k)) % k;
            let from = rng.random_range(0..t);
            let to = rng.random_range(from + 1..=t);
            for f in from..to {
                sounding[extra][f] = true;
            }
        }
        for f in 0..t {
            if rng.random::<f64>() < cfg.silent_prob {
                sounding.iter_mut().for_each(|s| s[f] = false);
            }
        }
        if !sounding.iter().any(|s| s.contains(&true)) {
            sounding[main][rng.random_range(0..t)] = true;
        }
        for (s, flags) in shapes.iter_mut().zip(sounding) {
            s.sounding = flags;
        }
        let background = [rng.random_range(0.0..0.3); 3];
        return Ok(SceneSpec {
            frames: t,
            height: cfg.height,
            width: cfg.width,
            background,
            shapes,
            noise: cfg.noise,
            seed: rng.random(),
        });
    }
}

/// Per-sample seeds derived from one base seed.
pub fn sample_seeds(base: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..n).map(|_| rng.random()).collect()
}

pub fn generate(cfg: &GenConfig, seeds: &[u64]) -> Result<Vec<AvvsSample>> {
    seeds.iter().map(|&s| render(&random_scene(cfg, s)?)).collect()
}

/// Two scenes with the same two kinds, the first with `kinds[0]` sounding in
/// every frame and the second with `kinds[1]`.
pub fn swap_scenes(cfg: &GenConfig, seed: u64) -> Result<(SceneSpec, SceneSpec)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng.random_range(0..3);
    let b = (a + rng.random_range(1..3)) % 3;
    let kinds = [Kind::ALL[a], Kind::ALL[b]];
    let mut make = |who: usize| -> SceneSpec {
        let mut shapes = loop {
            if let Some(s) = place_shapes(cfg, &kinds, &mut rng) {
                break s;
            }
        };
        shapes[who].sounding = vec![true; cfg.frames];
        SceneSpec {
            frames: cfg.frames,
            height: cfg.height,
            width: cfg.width,
            background: [rng.random_range(0.0..0.3); 3],
            shapes,
            noise: cfg.noise,
            seed: rng.random(),
        }
    };
    let first = make(0);
    let second = make(1);
    Ok((first, second))
}

/// `scene` with its sounding flags replaced by those of `donor`, matched by kind.
pub fn with_sounding_of(scene: &SceneSpec, donor: &SceneSpec) -> Result<SceneSpec> {
    let mut kinds_a: Vec<Kind> = scene.shapes.iter().map(|s| s.kind).collect();
    let mut kinds_b: Vec<Kind> = donor.shapes.iter().map(|s| s.kind).collect();
    kinds_a.sort_by_key(|k| k.index());
    kinds_b.sort_by_key(|k| k.index());
    kinds_a.dedup();
    kinds_b.dedup();
    if scene.frames != donor.frames || kinds_a != kinds_b {
        return Err(CatrError::Validation(format!(
            "audio swap needs equal frame counts and kinds, got {} {:?} vs {} {:?}",
            scene.frames, kinds_a, donor.frames, kinds_b
        )));
    }
    let mut out = scene.clone();
    for s in &mut out.shapes {
        s.sounding = (0..scene.frames).map(|t| donor.sounding_kinds(t).contains(&s.kind)).collect();
    }
    Ok(out)
}

/// The two originals plus versions with their audio tracks exchanged. Swapped
/// ground truth follows the swapped audio.
#[derive(Clone, Debug)]
pub struct SwapPair {
    pub a: AvvsSample,
    pub b: AvvsSample,
    pub swapped_a: AvvsSample,
    pub swapped_b: AvvsSample,
}

pub fn audio_swap_pair(spec_a: &SceneSpec, spec_b: &SceneSpec) -> Result<SwapPair> {
    let a = render(spec_a)?;
    let b = render(spec_b)?;
    let swap = |base: &AvvsSample, donor: &AvvsSample| -> Result<AvvsSample> {
        let spec = with_sounding_of(&base.spec, &donor.spec)?;
        let mut s = render(&spec)?;
        s.video = base.video.clone();
        s.audio = donor.audio.clone();
        Ok(s)
    };
    let swapped_a = swap(&a, &b)?;
    let swapped_b = swap(&b, &a)?;
    Ok(SwapPair { a, b, swapped_a, swapped_b })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetManifest {
    version: u32,
    samples: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    dir: String,
    spec: SceneSpec,
}

pub fn write_dataset(samples: &[AvvsSample], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CatrError::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let name = format!("s{i:05}");
        let sub = dir.join(&name);
        fs::create_dir_all(&sub).map_err(|e| CatrError::io(&sub, e))?;
        write_tensor(&sub.join("video.t"), &s.video, DType::F32)?;
        write_tensor(&sub.join("audio.t"), &s.audio, DType::F32)?;
        write_tensor(&sub.join("masks.t"), &s.gt.masks, DType::F32)?;
        let vis = Tensor::new(&[s.gt.frames()], s.gt.visibility_f64())?;
        write_tensor(&sub.join("vis.t"), &vis, DType::F32)?;
        entries.push(ManifestEntry { dir: name, spec: s.spec.clone() });
    }
    let path = dir.join(MANIFEST);
    let manifest = DatasetManifest { version: DATASET_VERSION, samples: entries };
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| CatrError::io(&path, e))
}

pub fn read_dataset(dir: &Path) -> Result<Vec<AvvsSample>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CatrError::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| CatrError::Format { path: path.clone(), msg: e.to_string() })?;
    if manifest.version != DATASET_VERSION {
        return Err(CatrError::Format { path, msg: format!("unsupported dataset version {}", manifest.version) });
    }
    manifest
        .samples
        .into_iter()
        .map(|e| {
            let sub: PathBuf = dir.join(&e.dir);
            let video = read_tensor(&sub.join("video.t"))?;
            let audio = read_tensor(&sub.join("audio.t"))?;
            let masks = read_tensor(&sub.join("masks.t"))?;
            let vis_path = sub.join("vis.t");
            let vis = read_tensor(&vis_path)?;
            let visibility = vis.data().iter().map(|&v| v == 1.0).collect();
            let gt = GroundTruth::new(masks, visibility)
                .map_err(|err| CatrError::Format { path: vis_path, msg: err.to_string() })?;
            let (t, h, w) = (e.spec.frames, e.spec.height, e.spec.width);
            if video.shape() != [t, h, w, 3] || audio.shape() != [t, AUDIO_DIM] || gt.masks.shape() != [t, h, w] {
                return Err(CatrError::Format { path: sub, msg: "tensor shapes disagree with the manifest".into() });
            }
            Ok(AvvsSample { spec: e.spec, video, audio, gt })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> GenConfig {
        GenConfig { frames: 3, height: 32, width: 32, min_radius: 5.0, max_radius: 7.0, ..GenConfig::default() }
    }

    fn circle(frames: usize, sounding: Vec<bool>) -> ShapeSpec {
        ShapeSpec {
            kind: Kind::Circle,
            color: [1.0, 0.0, 0.0],
            start: [10.0, 12.0],
            velocity: [1.0, 0.5],
            radius: 4.0,
            sounding: if sounding.is_empty() { vec![true; frames] } else { sounding },
        }
    }

    fn scene(shapes: Vec<ShapeSpec>, noise: f64) -> SceneSpec {
        SceneSpec { frames: 3, height: 24, width: 24, background: [0.1; 3], shapes, noise, seed: 9 }
    }

    #[test]
    fn signatures_are_orthonormal() {
        let s = signatures();
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..AUDIO_DIM).map(|k| s.at(&[i, k]) * s.at(&[j, k])).sum();
                assert!((d - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_circle_sounding_everywhere() {
        let spec = scene(vec![circle(3, vec![])], 0.05);
        let s = render(&spec).unwrap();
        assert_eq!(s.gt.visibility, vec![true; 3]);
        for t in 0..3 {
            for y in 0..24 {
                for x in 0..24 {
                    let (cx, cy) = (10.0 + t as f64, 12.0 + 0.5 * t as f64);
                    let inside = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2) <= 16.0;
                    assert_eq!(s.gt.masks.at(&[t, y, x]) == 1.0, inside);
                    assert_eq!(s.video.at(&[t, y, x, 0]) == 1.0, inside);
                }
            }
        }
    }

    #[test]
    fn same_kind_shapes_give_the_exact_signature() {
        let mut second = circle(3, vec![]);
        second.start = [18.0, 4.0];
        second.velocity = [0.0, 0.0];
        second.radius = 3.0;
        let s = render(&scene(vec![circle(3, vec![]), second], 0.0)).unwrap();
        let sig = signatures();
        for t in 0..3 {
            for d in 0..AUDIO_DIM {
                assert_eq!(s.audio.at(&[t, d]), sig.at(&[0, d]) as f32 as f64);
            }
        }
    }

    #[test]
    fn silent_frames_are_noise_and_invisible() {
        let spec = scene(vec![circle(3, vec![true, false, true])], 0.05);
        let s = render(&spec).unwrap();
        assert_eq!(s.gt.visibility, vec![true, false, true]);
        let norm: f64 = (0..AUDIO_DIM).map(|d| s.audio.at(&[1, d]).powi(2)).sum::<f64>().sqrt();
        assert!(norm > 0.2 && norm < 1.0, "{norm}");
    }

    #[test]
    fn invalid_specs_are_validation_errors() {
        let mut far = circle(3, vec![]);
        far.velocity = [10.0, 0.0];
        assert!(matches!(render(&scene(vec![far], 0.0)), Err(CatrError::Validation(_))));
        let quiet = circle(3, vec![false; 3]);
        assert!(matches!(render(&scene(vec![quiet], 0.0)), Err(CatrError::Validation(_))));
        assert!(matches!(render(&scene(vec![], 0.0)), Err(CatrError::Validation(_))));
    }

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let cfg = small();
        let seeds = sample_seeds(7, 30);
        let a = generate(&cfg, &seeds).unwrap();
        let b = generate(&cfg, &seeds).unwrap();
        assert_eq!(a, b);
        let sig = signatures();
        for s in &a {
            let shapes = &s.spec.shapes;
            assert!(shapes.len() <= 3);
            for t in 0..3 {
                // decode kinds from noiseless audio: positive projections
                let clean = render(&SceneSpec { noise: 0.0, ..s.spec.clone() }).unwrap();
                let heard: Vec<Kind> = Kind::ALL
                    .into_iter()
                    .filter(|k| (0..AUDIO_DIM).map(|d| clean.audio.at(&[t, d]) * sig.at(&[k.index(), d])).sum::<f64>() > 0.25)
                    .collect();
                let seen: Vec<Kind> = Kind::ALL
                    .into_iter()
                    .filter(|k| {
                        shapes.iter().any(|sh| {
                            sh.kind == *k
                                && (0..32).any(|y| (0..32).any(|x| sh.contains(t, x, y) && s.gt.masks.at(&[t, y, x]) == 1.0))
                        })
                    })
                    .collect();
                assert_eq!(heard, seen);
            }
        }
    }

    #[test]
    fn shapes_never_overlap_and_stay_inside() {
        let cfg = small();
        for spec in sample_seeds(3, 40).into_iter().map(|s| random_scene(&cfg, s).unwrap()) {
            for t in 0..cfg.frames {
                for y in 0..32 {
                    for x in 0..32 {
                        assert!(spec.shapes.iter().filter(|s| s.contains(t, x, y)).count() <= 1);
                    }
                }
                for s in &spec.shapes {
                    let (cx, cy) = s.center(t);
                    assert!(cx - s.extent() >= 0.0 && cx + s.extent() <= 32.0);
                    assert!(cy - s.extent() >= 0.0 && cy + s.extent() <= 32.0);
                }
            }
        }
    }

    #[test]
    fn audio_swap_follows_the_audio() {
        let cfg = small();
        let (sa, sb) = swap_scenes(&cfg, 5).unwrap();
        let pair = audio_swap_pair(&sa, &sb).unwrap();
        assert_eq!(pair.swapped_a.audio, pair.b.audio);
        assert_eq!(pair.swapped_a.video, pair.a.video);
        // swapped target is the other shape's raster, disjoint from the original
        let other = &sa.shapes[1];
        for t in 0..cfg.frames {
            for y in 0..32 {
                for x in 0..32 {
                    let m = pair.swapped_a.gt.masks.at(&[t, y, x]);
                    assert_eq!(m == 1.0, other.contains(t, x, y));
                    assert!(!(m == 1.0 && pair.a.gt.masks.at(&[t, y, x]) == 1.0));
                }
            }
        }
        let same = audio_swap_pair(&sa, &sa).unwrap();
        assert_eq!(same.swapped_a.gt, same.a.gt);

        let mut lonely = sa.clone();
        lonely.shapes.truncate(1);
        assert!(matches!(audio_swap_pair(&lonely, &sb), Err(CatrError::Validation(_))));
    }

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(&small(), &sample_seeds(1, 4)).unwrap();
        write_dataset(&samples, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(samples, back);

        let f = dir.path().join("s00002").join("audio.t");
        let bytes = std::fs::read(&f).unwrap();
        std::fs::write(&f, &bytes[..bytes.len() - 3]).unwrap();
        match read_dataset(dir.path()) {
            Err(CatrError::Format { path, .. }) => assert_eq!(path, f),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn desk_dataset_size_estimate() {
        // f32 payloads: video T·H·W·3, audio T·128, masks T·H·W, vis T
        let (t, h, w) = (5usize, 32usize, 32usize);
        let per = 4 * (t * h * w * 3 + t * 128 + t * h * w + t);
        assert!(200 * per < 100 * 1024 * 1024);
        let (h, w) = (64usize, 64usize);
        let per = 4 * (t * h * w * 3 + t * 128 + t * h * w + t);
        assert!(200 * per < 100 * 1024 * 1024);
    }
}

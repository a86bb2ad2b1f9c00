//! Attention-score accounting: joint spatio-temporal attention against the
//! decoupled block.
//!
//! Costs are counted in pre-softmax score entries. A joint layer attends over
//! all `T·(P+1)` video and audio tokens at once; the decoupled block runs
//! `T` spatial problems of `P+1` tokens, `P` temporal A→V problems of `T×T`,
//! and one temporal V→A problem of `T×T`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::davt::{features_from, DavtBlock};
use crate::error::{CatrError, Result};
use crate::nn::{Graph, MultiHeadAttention, ParamStore};
use crate::tensor::Tensor;

/// Score entries of each attention step for one `(T, h, w)` configuration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttnCost {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub joint: u64,
    pub spatial: u64,
    pub tav: u64,
    pub tva: u64,
}

impl AttnCost {
    pub fn decoupled(&self) -> u64 {
        self.spatial + self.tav + self.tva
    }

    pub fn ratio(&self) -> f64 {
        self.joint as f64 / self.decoupled() as f64
    }

    /// The `(P + T)²` figure from reading the joint token count as `H·W + T`.
    pub fn literal_joint(&self) -> u64 {
        let n = (self.h * self.w + self.t) as u64;
        n * n
    }
}

pub fn analytic_costs(t: usize, h: usize, w: usize) -> Result<AttnCost> {
    if t == 0 || h == 0 || w == 0 {
        return Err(CatrError::Validation(format!("attention cost needs positive dims, got T={t} h={h} w={w}")));
    }
    let (t64, p) = (t as u64, (h * w) as u64);
    let tokens = t64 * (p + 1);
    Ok(AttnCost {
        t,
        h,
        w,
        joint: tokens * tokens,
        spatial: t64 * (p + 1) * (p + 1),
        tav: p * t64 * t64,
        tva: t64 * t64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Joint,
    Decoupled,
}

/// Size of the configuration used for a measured forward pass.
#[derive(Clone, Copy, Debug)]
pub struct MeasureConfig {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub channels: usize,
    pub heads: usize,
    /// Refuse to run when one score buffer would exceed this many bytes.
    pub limit_bytes: u64,
}

impl MeasureConfig {
    pub fn new(t: usize, h: usize, w: usize, channels: usize, heads: usize) -> Self {
        Self { t, h, w, channels, heads, limit_bytes: 256 << 20 }
    }
}

/// Score-buffer bytes of one measured forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    /// Bytes of each score buffer, in execution order.
    pub buffers: Vec<u64>,
    /// Buffers are released after each attention step, so the transient
    /// peak is the largest single buffer.
    pub peak: u64,
}

/// Runs one forward pass of the chosen attention variant on random features
/// and records the size of every score/probability buffer it materializes.
pub fn measure_peak(variant: Variant, cfg: &MeasureConfig) -> Result<Measurement> {
    let MeasureConfig { t, h, w, channels: c, heads, limit_bytes } = *cfg;
    let cost = analytic_costs(t, h, w)?;
    let f64_bytes = std::mem::size_of::<f64>() as u64;
    let worst = match variant {
        Variant::Joint => cost.joint,
        Variant::Decoupled => cost.spatial.max(cost.tav).max(cost.tva),
    } * heads as u64
        * f64_bytes;
    if worst > limit_bytes {
        return Err(CatrError::Resource(format!(
            "{variant:?} attention at T={t} {h}x{w} needs a {worst}-byte score buffer (limit {limit_bytes})"
        )));
    }
    let p = h * w;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let video = Tensor::randn(&[t, p, c], 1.0, &mut rng);
    let audio = Tensor::randn(&[t, c], 1.0, &mut rng);
    let mut store = ParamStore::new();
    let tape_records = |g: &Graph<'_>| -> Vec<u64> {
        g.softmax_records().map(|r| r.data.len() as u64 * f64_bytes).collect()
    };
    let buffers = match variant {
        Variant::Joint => {
            let mha = MultiHeadAttention::new(&mut store, "joint", c, heads, &mut rng)?;
            let mut g = Graph::new(&store);
            let v = g.constant(&video);
            let a = g.constant(&audio);
            let a = g.reshape(a, &[t, 1, c])?;
            let all = g.concat(&[v, a], 1)?;
            let all = g.reshape(all, &[1, t * (p + 1), c])?;
            mha.forward(&mut g, all, all, all)?;
            tape_records(&g)
        }
        Variant::Decoupled => {
            let block = DavtBlock::new(&mut store, "block", c, heads, &mut rng)?;
            let mut g = Graph::new(&store);
            let (vv, av) = (g.constant(&video), g.constant(&audio));
            let (vf, af) = features_from(&mut g, vv, av, (h, w))?;
            block.forward(&mut g, vf, af)?;
            tape_records(&g)
        }
    };
    let peak = buffers.iter().copied().max().unwrap_or(0);
    Ok(Measurement { buffers, peak })
}

/// One CSV row of the benchmark report.
#[derive(Clone, Debug, PartialEq)]
pub struct CostRow {
    pub cost: AttnCost,
    pub measured_joint: Option<u64>,
    pub measured_decoupled: Option<u64>,
}

pub const CSV_HEADER: &str = "T,h,w,joint,spatial,tav,tva,ratio,measured_joint,measured_decoupled";

pub fn cost_row(cfg: &MeasureConfig) -> Result<CostRow> {
    let cost = analytic_costs(cfg.t, cfg.h, cfg.w)?;
    let measured = |v| match measure_peak(v, cfg) {
        Ok(m) => Ok(Some(m.peak)),
        Err(CatrError::Resource(_)) => Ok(None),
        Err(e) => Err(e),
    };
    Ok(CostRow { measured_joint: measured(Variant::Joint)?, measured_decoupled: measured(Variant::Decoupled)?, cost })
}

pub fn to_csv(rows: &[CostRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    let opt = |x: Option<u64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let c = &r.cost;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{:.6},{},{}",
            c.t,
            c.h,
            c.w,
            c.joint,
            c.spatial,
            c.tav,
            c.tva,
            c.ratio(),
            opt(r.measured_joint),
            opt(r.measured_decoupled)
        );
    }
    out
}

pub fn write_csv(rows: &[CostRow], path: &Path) -> Result<()> {
    fs::write(path, to_csv(rows)).map_err(|e| CatrError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn degenerate_single_frame() {
        let c = analytic_costs(1, 4, 4).unwrap();
        assert_eq!(c.joint, 17 * 17);
        assert_eq!(c.decoupled(), 17 * 17 + 16 + 1);
        assert!(analytic_costs(0, 4, 4).is_err());
    }

    #[test]
    fn five_frames_sixteen_square() {
        let c = analytic_costs(5, 16, 16).unwrap();
        assert_eq!(c.joint, 1_651_225);
        assert_eq!((c.spatial, c.tav, c.tva), (330_245, 6_400, 25));
        assert_eq!(c.decoupled(), 336_670);
        assert!((c.ratio() - 4.9046).abs() < 1e-3);
        assert_eq!(c.literal_joint(), 261 * 261);
        assert!(analytic_costs(10, 16, 16).unwrap().ratio() > c.ratio());
    }

    #[test]
    fn measured_joint_buffer_equals_analytic_entries() {
        let cfg = MeasureConfig::new(5, 8, 8, 32, 4);
        let joint = measure_peak(Variant::Joint, &cfg).unwrap();
        let cost = analytic_costs(5, 8, 8).unwrap();
        assert_eq!(joint.buffers, vec![cost.joint * 4 * 8]);
        let dec = measure_peak(Variant::Decoupled, &cfg).unwrap();
        assert_eq!(dec.buffers, vec![cost.spatial * 32, cost.tav * 32, cost.tva * 32]);
        assert!(dec.peak < joint.peak);
    }

    #[test]
    fn single_frame_variants_are_close() {
        let cfg = MeasureConfig::new(1, 8, 8, 16, 2);
        let j = measure_peak(Variant::Joint, &cfg).unwrap().peak as f64;
        let d = measure_peak(Variant::Decoupled, &cfg).unwrap().peak as f64;
        assert!((j - d).abs() / j <= 0.05);
    }

    #[test]
    fn oversized_joint_is_a_resource_error() {
        let mut cfg = MeasureConfig::new(8, 32, 32, 8, 2);
        cfg.limit_bytes = 1 << 20;
        assert!(matches!(measure_peak(Variant::Joint, &cfg), Err(CatrError::Resource(_))));
        let row = cost_row(&cfg).unwrap();
        assert_eq!(row.measured_joint, None);
        let csv = to_csv(&[row]);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().nth(1).unwrap().split(',').count(), 10);
    }

    proptest! {
        #[test]
        fn decoupling_is_cheaper_when_frames_fit(t in 2usize..12, h in 1usize..12, w in 1usize..12) {
            prop_assume!(h * w >= t);
            let c = analytic_costs(t, h, w).unwrap();
            prop_assert!(c.decoupled() < c.joint);
        }
    }
}

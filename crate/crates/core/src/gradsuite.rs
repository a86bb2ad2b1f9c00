//! Registry of finite-difference gradient checks over every differentiable op
//! and module, at small fixed shapes.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradcheck_many, Tape, Var};
use crate::config::{LossConfig, ModelConfig};
use crate::davt::{features_from, DavtBlock, DavtEncoder};
use crate::decoder::{QueryDecoder, SegFeatures, SegHead};
use crate::error::Result;
use crate::features::{AudioEmbedding, AudioFeatures, PyramidLevel, VideoFeatures, VisualBackbone, VisualPyramid};
use crate::gate::{gate_fold, GateUnit};
use crate::matching::{dice_loss, focal_loss, training_loss, GroundTruth};
use crate::model::Catr;
use crate::nn::{gradcheck_module, gradcheck_module_sampled, Conv2d, Graph, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};
use crate::tensor::Tensor;

pub const EPS: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

type CheckFn = Box<dyn Fn(f64) -> Result<f64>>;

/// A named check returning the worst relative gradient error for a given
/// finite-difference step.
pub struct GradCase {
    pub name: &'static str,
    run: CheckFn,
}

impl GradCase {
    pub fn new(name: &'static str, run: impl Fn(f64) -> Result<f64> + 'static) -> Self {
        Self { name, run: Box::new(run) }
    }

    pub fn run(&self, eps: f64) -> Result<f64> {
        (self.run)(eps)
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    /// Worst relative error, or the failure message.
    pub outcome: std::result::Result<f64, String>,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passed(&self, tol: f64) -> bool {
        matches!(self.outcome, Ok(e) if e < tol)
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub tolerance: f64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed(self.tolerance))
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.outcome.as_ref().copied().unwrap_or(f64::INFINITY)).fold(0.0, f64::max)
    }

    pub fn render(&self) -> String {
        let width = self.cases.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut out = String::new();
        for c in &self.cases {
            let status = if c.passed(self.tolerance) { "ok" } else { "FAIL" };
            let err = match &c.outcome {
                Ok(e) => format!("{e:.3e}"),
                Err(msg) => format!("error: {msg}"),
            };
            let _ = writeln!(out, "{:<width$}  {:>10}  {:>4}  {:.2?}", c.name, err, status, c.elapsed);
        }
        let failed = self.cases.iter().filter(|c| !c.passed(self.tolerance)).count();
        let _ = writeln!(
            out,
            "{} checks, {failed} failed, worst {:.3e} (tolerance {:.0e})",
            self.cases.len(),
            self.worst(),
            self.tolerance
        );
        out
    }
}

pub fn run_suite(cases: &[GradCase], eps: f64, tolerance: f64) -> SuiteReport {
    let cases = cases
        .iter()
        .map(|c| {
            let start = Instant::now();
            let outcome = c.run(eps).map_err(|e| e.to_string());
            CaseResult { name: c.name, outcome, elapsed: start.elapsed() }
        })
        .collect();
    SuiteReport { tolerance, cases }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// Random values bounded away from zero, for ops with a kink there.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let t = randn(shape, seed);
    let data = t.data().iter().map(|&x| x.signum() * (0.2 + x.abs())).collect();
    Tensor::new(shape, data).expect("same shape")
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let t = randn(shape, seed);
    let data = t.data().iter().map(|&x| 0.5 + x.abs()).collect();
    Tensor::new(shape, data).expect("same shape")
}

/// `Σ w ⊙ x` with fixed random weights, so every output coordinate matters.
fn weighted(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let w = randn(t.shape(x), seed);
    let w = t.constant(&w);
    let p = t.mul(x, w)?;
    Ok(t.sum_all(p))
}

fn unary(name: &'static str, input: Tensor, f: fn(&mut Tape, Var) -> Result<Var>) -> GradCase {
    GradCase::new(name, move |eps| {
        gradcheck_many(
            |t, v| {
                let y = f(t, v[0])?;
                weighted(t, y, 99)
            },
            std::slice::from_ref(&input),
            eps,
        )
    })
}

fn binary(name: &'static str, a: Tensor, b: Tensor, f: fn(&mut Tape, Var, Var) -> Result<Var>) -> GradCase {
    let inputs = [a, b];
    GradCase::new(name, move |eps| {
        gradcheck_many(
            |t, v| {
                let y = f(t, v[0], v[1])?;
                weighted(t, y, 98)
            },
            &inputs,
            eps,
        )
    })
}

fn op_cases() -> Vec<GradCase> {
    vec![
        binary("add", randn(&[2, 3], 1), randn(&[2, 3], 2), |t, a, b| t.add(a, b)),
        binary("add (suffix broadcast)", randn(&[2, 3, 4], 3), randn(&[4], 4), |t, a, b| t.add(a, b)),
        binary("sub", randn(&[2, 3], 5), randn(&[3], 6), |t, a, b| t.sub(a, b)),
        binary("mul", randn(&[2, 3], 7), randn(&[2, 3], 8), |t, a, b| t.mul(a, b)),
        binary("mul (scalar broadcast)", randn(&[2, 3], 9), randn(&[1], 10), |t, a, b| t.mul(a, b)),
        unary("scale", randn(&[5], 11), |t, x| Ok(t.scale(x, -1.7))),
        unary("shift", randn(&[5], 12), |t, x| Ok(t.shift(x, 0.3))),
        unary("sigmoid", randn(&[6], 13), |t, x| Ok(t.sigmoid(x))),
        unary("relu", away_from_zero(&[6], 14), |t, x| Ok(t.relu(x))),
        unary("ln", positive(&[6], 15), |t, x| Ok(t.ln(x))),
        unary("log_sigmoid", randn(&[6], 16), |t, x| Ok(t.log_sigmoid(x))),
        unary("exp", randn(&[6], 17), |t, x| Ok(t.exp(x))),
        unary("square", randn(&[6], 18), |t, x| Ok(t.square(x))),
        binary("matmul", randn(&[2, 3, 4], 19), randn(&[4, 5], 20), |t, a, b| t.matmul(a, b)),
        binary("matmul (batched)", randn(&[2, 3, 4], 21), randn(&[2, 4, 2], 22), |t, a, b| t.matmul(a, b)),
        binary("matmul_t (a transposed)", randn(&[2, 4, 3], 23), randn(&[2, 4, 2], 24), |t, a, b| {
            t.matmul_t(a, b, true, false)
        }),
        binary("matmul_t (b transposed)", randn(&[2, 3, 4], 25), randn(&[2, 5, 4], 26), |t, a, b| {
            t.matmul_t(a, b, false, true)
        }),
        unary("softmax", randn(&[2, 3, 4], 27), |t, x| t.softmax(x, 1)),
        unary("log_softmax", randn(&[2, 3, 4], 28), |t, x| t.log_softmax(x, 2)),
        unary("layer_norm", randn(&[3, 5], 29), |t, x| t.layer_norm(x, 1)),
        unary("sum_axis", randn(&[2, 3, 4], 30), |t, x| t.sum_axis(x, 1)),
        unary("mean_pool", randn(&[2, 3, 4], 31), |t, x| t.mean_pool(x, 0)),
        unary("sum_all", randn(&[2, 3], 32), |t, x| Ok(t.sum_all(x))),
        unary("mean_all", randn(&[2, 3], 33), |t, x| Ok(t.mean_all(x))),
        binary("concat", randn(&[2, 3, 2], 34), randn(&[2, 1, 2], 35), |t, a, b| t.concat(&[a, b], 1)),
        unary("slice", randn(&[2, 5, 3], 36), |t, x| t.slice(x, 1, 1, 3)),
        unary("reshape", randn(&[2, 6], 37), |t, x| t.reshape(x, &[3, 4])),
        unary("permute", randn(&[2, 3, 4], 38), |t, x| t.permute(x, &[2, 0, 1])),
        unary("expand", randn(&[2, 3], 39), |t, x| t.expand(x, 1, 4)),
        binary("conv2d (stride 1, pad 1)", randn(&[2, 4, 4, 2], 40), randn(&[3, 3, 2, 3], 41), |t, x, w| {
            t.conv2d(x, w, 1, 1)
        }),
        binary("conv2d (stride 2, pad 1)", randn(&[1, 5, 5, 2], 42), randn(&[3, 3, 2, 2], 43), |t, x, w| {
            t.conv2d(x, w, 2, 1)
        }),
        unary("upsample2x", randn(&[2, 2, 3, 2], 44), |t, x| t.upsample2x(x)),
        unary("avg_pool", randn(&[1, 4, 4, 2], 45), |t, x| t.avg_pool(x, 2)),
        GradCase::new("linear", |eps| {
            let inputs = [randn(&[2, 3], 46), randn(&[3, 4], 47), randn(&[4], 48)];
            gradcheck_many(
                |t, v| {
                    let y = t.linear(v[0], v[1], Some(v[2]))?;
                    weighted(t, y, 97)
                },
                &inputs,
                eps,
            )
        }),
    ]
}

/// Gradient check of a module: every parameter and every input is perturbed.
fn module_case<B, F>(name: &'static str, inputs: Vec<Tensor>, build: B, forward: F) -> GradCase
where
    B: Fn(&mut ParamStore) -> Result<Box<dyn std::any::Any>> + 'static,
    F: Fn(&dyn std::any::Any, &mut Graph<'_>, &[Var]) -> Result<Var> + 'static,
{
    GradCase::new(name, move |eps| {
        let mut store = ParamStore::new();
        let module = build(&mut store)?;
        gradcheck_module(&store, &inputs, eps, |g, x| {
            let y = forward(module.as_ref(), g, x)?;
            weighted(g, y, 96)
        })
    })
}

fn get<T: 'static>(m: &dyn std::any::Any) -> &T {
    m.downcast_ref::<T>().expect("module type registered with its case")
}

fn module_cases() -> Vec<GradCase> {
    const C: usize = 4;
    vec![
        module_case(
            "Linear",
            vec![randn(&[3, C], 50)],
            |s| Ok(Box::new(Linear::new(s, "l", C, 3, true, &mut rng(51))?)),
            |m, g, x| get::<Linear>(m).forward(g, x[0]),
        ),
        module_case(
            "LayerNorm",
            vec![randn(&[3, C], 52)],
            |s| {
                let ln = LayerNorm::new(s, "ln", C)?;
                // non-trivial affine part
                s.set(ln.gamma, randn(&[C], 53))?;
                s.set(ln.beta, randn(&[C], 54))?;
                Ok(Box::new(ln))
            },
            |m, g, x| get::<LayerNorm>(m).forward(g, x[0]),
        ),
        module_case(
            "Mlp",
            vec![randn(&[3, C], 55)],
            |s| Ok(Box::new(Mlp::new(s, "mlp", [C, 2 * C, 3], &mut rng(56))?)),
            |m, g, x| get::<Mlp>(m).forward(g, x[0]),
        ),
        module_case(
            "Conv2d",
            vec![randn(&[1, 4, 4, 2], 57)],
            |s| Ok(Box::new(Conv2d::new(s, "conv", 2, 3, 3, 2, &mut rng(58))?)),
            |m, g, x| get::<Conv2d>(m).forward(g, x[0]),
        ),
        module_case(
            "MultiHeadAttention",
            vec![randn(&[2, 3, C], 59), randn(&[2, 4, C], 60)],
            |s| Ok(Box::new(MultiHeadAttention::new(s, "mha", C, 2, &mut rng(61))?)),
            |m, g, x| get::<MultiHeadAttention>(m).forward(g, x[0], x[1], x[1]),
        ),
        module_case(
            "VisualBackbone",
            vec![randn(&[1, 8, 8, 3], 62)],
            |s| Ok(Box::new(VisualBackbone::new(s, "bb", C, &mut rng(63))?)),
            |m, g, x| {
                let pyr = get::<VisualBackbone>(m).extract_visual(g, x[0])?;
                let parts: Vec<Var> = pyr.levels.iter().map(|l| l.map).collect();
                let flat = parts.iter().map(|&p| {
                    let n = g.shape(p).iter().product();
                    g.reshape(p, &[n])
                });
                let flat = flat.collect::<Result<Vec<_>>>()?;
                g.concat(&flat, 0)
            },
        ),
        module_case(
            "AudioEmbedding",
            vec![randn(&[2, crate::features::AUDIO_DIM], 64)],
            |s| Ok(Box::new(AudioEmbedding::new(s, "audio", C, &mut rng(65))?)),
            |m, g, x| Ok(get::<AudioEmbedding>(m).embed_audio(g, x[0])?.tokens),
        ),
        module_case(
            "DAVT spatial fusion",
            vec![randn(&[2, 4, C], 66), randn(&[2, C], 67)],
            |s| Ok(Box::new(DavtBlock::new(s, "b", C, 2, &mut rng(68))?)),
            |m, g, x| {
                let (v, a) = features_from(g, x[0], x[1], (2, 2))?;
                let (v, a) = get::<DavtBlock>(m).spatial_fusion(g, v, a)?;
                let a = g_expand_audio(g, a, 1)?;
                g.concat(&[v.tokens, a], 1)
            },
        ),
        module_case(
            "DAVT temporal A-V",
            vec![randn(&[3, 4, C], 69), randn(&[3, C], 70)],
            |s| Ok(Box::new(DavtBlock::new(s, "b", C, 2, &mut rng(71))?)),
            |m, g, x| {
                let (v, a) = features_from(g, x[0], x[1], (2, 2))?;
                Ok(get::<DavtBlock>(m).temporal_av(g, v, a)?.tokens)
            },
        ),
        module_case(
            "DAVT temporal V-A",
            vec![randn(&[3, 4, C], 72), randn(&[3, C], 73)],
            |s| Ok(Box::new(DavtBlock::new(s, "b", C, 2, &mut rng(74))?)),
            |m, g, x| {
                let (v, a) = features_from(g, x[0], x[1], (2, 2))?;
                let (wide, a) = get::<DavtBlock>(m).temporal_va(g, v, a)?;
                let a = g_expand_audio(g, a, 1)?;
                g.concat(&[wide.tokens, a], 1)
            },
        ),
        module_case(
            "DAVT block",
            vec![randn(&[3, 4, C], 75), randn(&[3, C], 76)],
            |s| Ok(Box::new(DavtBlock::new(s, "b", C, 2, &mut rng(77))?)),
            |m, g, x| {
                let (v, a) = features_from(g, x[0], x[1], (2, 2))?;
                let (v, a) = get::<DavtBlock>(m).forward(g, v, a)?;
                let a = g_expand_audio(g, a, 1)?;
                g.concat(&[v.tokens, a], 1)
            },
        ),
        module_case(
            "DAVT encoder (2 blocks)",
            vec![randn(&[3, 4, C], 78), randn(&[3, C], 79)],
            |s| Ok(Box::new(DavtEncoder::new(s, "enc", 3, C, 2, 2, &mut rng(80))?)),
            |m, g, x| {
                let (v, a) = features_from(g, x[0], x[1], (2, 2))?;
                let out = get::<DavtEncoder>(m).forward(g, v, a)?;
                let mut parts: Vec<Var> = out.blocks.iter().map(|b| b.tokens).collect();
                parts.push(g_expand_audio(g, out.audio, 1)?);
                g.concat(&parts, 1)
            },
        ),
        module_case(
            "gate_fold (2 blocks)",
            vec![randn(&[2, 3, C], 81), randn(&[2, 3, C], 82)],
            |s| Ok(Box::new(GateUnit::new(s, "gate", C, 2, &mut rng(83))?)),
            |m, g, x| {
                let fa = VideoFeatures::new(g, x[0], (1, 3))?;
                let fb = VideoFeatures::new(g, x[1], (1, 3))?;
                Ok(gate_fold(g, &[fa, fb], std::slice::from_ref(get::<GateUnit>(m)))?.tokens)
            },
        ),
        module_case(
            "gate_fold (3 blocks)",
            vec![randn(&[2, 3, C], 84), randn(&[2, 3, C], 85), randn(&[2, 3, C], 86)],
            |s| {
                let mut r = rng(87);
                Ok(Box::new(vec![GateUnit::new(s, "g0", C, C, &mut r)?, GateUnit::new(s, "g1", C, C, &mut r)?]))
            },
            |m, g, x| {
                let feats = x.iter().map(|&v| VideoFeatures::new(g, v, (1, 3))).collect::<Result<Vec<_>>>()?;
                Ok(gate_fold(g, &feats, get::<Vec<GateUnit>>(m))?.tokens)
            },
        ),
        module_case(
            "SegHead (strides 8, 4, 2)",
            vec![randn(&[1, 4, C], 88), randn(&[1, 8, 8, 1], 89), randn(&[1, 4, 4, 2], 90), randn(&[1, 2, 2, C], 91)],
            |s| Ok(Box::new(SegHead::new(s, "fpn", C, &[8, 4, 2], &mut rng(92))?)),
            |m, g, x| {
                let pyr = VisualPyramid {
                    levels: vec![
                        PyramidLevel { stride: 2, map: x[1] },
                        PyramidLevel { stride: 4, map: x[2] },
                        PyramidLevel { stride: 8, map: x[3] },
                    ],
                };
                let v = VideoFeatures::new(g, x[0], (2, 2))?;
                Ok(get::<SegHead>(m).build_seg_features(g, v, &pyr)?.tokens)
            },
        ),
        module_case(
            "query decoder (2 layers)",
            vec![randn(&[2, C], 93), randn(&[2, 4, C], 94)],
            |s| Ok(Box::new(QueryDecoder::new(s, "dec", C, 2, 3, 2, &mut rng(95))?)),
            |m, g, x| {
                let a = AudioFeatures::new(g, x[0])?;
                let out = get::<QueryDecoder>(m).forward(g, a, SegFeatures { tokens: x[1], grid: (2, 2) })?;
                let (nq, t, p) = {
                    let s = g.shape(out.mask_logits);
                    (s[0], s[1], s[2])
                };
                let masks = g.reshape(out.mask_logits, &[nq * t * p])?;
                let refs = g.reshape(out.reference_probs, &[nq * t * 2])?;
                g.concat(&[masks, refs], 0)
            },
        ),
    ]
}

/// `[T, C]` audio as `[T, 1, C]` so it can be concatenated with video tokens.
fn g_expand_audio(g: &mut Graph<'_>, a: AudioFeatures, axis: usize) -> Result<Var> {
    g.expand(a.tokens, axis, 1)
}

fn loss_target() -> (Tensor, Vec<bool>) {
    // two frames of a 4×4 image, stride 2: second frame is empty
    let mut m = Tensor::zeros(&[2, 4, 4]);
    for (y, x) in [(0, 0), (0, 1), (1, 0), (1, 1), (1, 2)] {
        m.set(&[0, y, x], 1.0);
    }
    (m, vec![true, false])
}

fn loss_cases() -> Vec<GradCase> {
    vec![
        GradCase::new("dice_loss", |eps| {
            let (masks, vis) = loss_target();
            let target = GroundTruth::new(masks, vis)?.targets(2)?;
            let target = target.reshape(&[1, 2, 4])?;
            gradcheck_many(
                |t, v| {
                    let p = t.sigmoid(v[0]);
                    let tg = t.constant(&target);
                    dice_loss(t, p, tg)
                },
                &[randn(&[1, 2, 4], 110)],
                eps,
            )
        }),
        GradCase::new("focal_loss", |eps| {
            let target = Tensor::new(&[1, 2, 3], vec![1.0, 0.0, 0.25, 0.0, 1.0, 0.5])?;
            gradcheck_many(
                |t, v| {
                    let tg = t.constant(&target);
                    focal_loss(t, v[0], tg, 2.0, 0.25)
                },
                &[randn(&[1, 2, 3], 111)],
                eps,
            )
        }),
        GradCase::new("training_loss", |eps| {
            let (masks, vis) = loss_target();
            let target = GroundTruth::new(masks, vis.clone())?.targets(2)?;
            let cfg = LossConfig::default();
            gradcheck_many(
                |t, v| Ok(training_loss(t, v[0], v[1], &target, &vis, &cfg)?.total),
                &[randn(&[3, 2, 4], 112), randn(&[3, 2, 2], 113)],
                eps,
            )
        }),
    ]
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        channels: 8,
        blocks: 2,
        heads: 2,
        num_queries: 2,
        decoder_layers: 1,
        gate_channels: 4,
        frames: 2,
        height: 16,
        width: 16,
        fpn_strides: vec![8, 4],
        use_gate: true,
        use_temporal_av: true,
    }
}

fn model_case() -> GradCase {
    GradCase::new("full model + loss (sampled)", |eps| {
        let cfg = tiny_model_config();
        let model = Catr::new(&cfg, 120)?;
        let video = Tensor::uniform(&[2, 16, 16, 3], 1.0, &mut rng(121));
        let audio = randn(&[2, crate::features::AUDIO_DIM], 122);
        let (masks, vis) = {
            let mut m = Tensor::zeros(&[2, 16, 16]);
            for y in 2..9 {
                for x in 3..11 {
                    m.set(&[0, y, x], 1.0);
                    m.set(&[1, y + 1, x + 2], 1.0);
                }
            }
            (m, vec![true, true])
        };
        let target = GroundTruth::new(masks, vis.clone())?.targets(8)?;
        let loss_cfg = LossConfig::default();
        gradcheck_module_sampled(&model.store, &[], eps, 4, 123, |g, _| {
            let out = model.forward(g, &video, &audio)?;
            Ok(training_loss(g, out.mask_logits, out.reference_logits, &target, &vis, &loss_cfg)?.total)
        })
    })
}

/// Every registered check: primitive ops, modules, losses and the full model.
pub fn registry() -> Vec<GradCase> {
    let mut cases = op_cases();
    cases.extend(module_cases());
    cases.extend(loss_cases());
    cases.push(model_case());
    cases
}

/// Negative control: `x²` recorded with a backward of `3x`.
pub fn corrupted_case() -> GradCase {
    GradCase::new("corrupted square", |eps| {
        gradcheck_many(
            |t, v| {
                let data: Vec<f64> = t.value(v[0]).iter().map(|a| a * a).collect();
                let shape = t.shape(v[0]).to_vec();
                let y = t.custom(
                    &[v[0]],
                    &shape,
                    data,
                    Box::new(|g, ins, _| vec![g.iter().zip(ins[0]).map(|(g, x)| g * 3.0 * x).collect()]),
                )?;
                Ok(t.sum_all(y))
            },
            &[randn(&[4], 130)],
            eps,
        )
    })
}

mod image;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use catr_core::config::RunConfig;
use catr_core::cost::{cost_row, write_csv, MeasureConfig};
use catr_core::data::{generate, read_dataset, sample_seeds, write_dataset, GenConfig};
use catr_core::gradsuite::{registry, run_suite, EPS, TOLERANCE};
use catr_core::metrics::evaluate;
use catr_core::model::Catr;
use catr_core::train::{overlay, predict, train, TrainOutputs};
use catr_core::{CatrError, Result};

#[derive(Parser, Debug)]
#[command(name = "catr", version, about = "Audio-queried video segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic audio-visual dataset.
    GenData(GenDataArgs),
    /// Train a model; writes checkpoints and a loss log.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset (region J and boundary F).
    Eval(EvalArgs),
    /// Write per-frame masks and overlays for dataset samples.
    Infer(InferArgs),
    /// Finite-difference check of every differentiable op and module.
    Gradcheck,
    /// Joint vs decoupled attention score-buffer accounting.
    BenchAttn(BenchArgs),
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability that a second kind sounds alongside the main one.
    #[arg(long)]
    multi_source: Option<f64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run configuration; the preset is used when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = "desk")]
    preset: String,
    /// Training set (overrides data.train_dir).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Held-out set scored after training (overrides data.eval_dir).
    #[arg(long)]
    eval_data: Option<PathBuf>,
    /// Output directory (overrides data.out_dir).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    /// Print a progress line every this many steps (0 for none).
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Where to write the JSON report; printed to stdout otherwise.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sample indices to process; all samples when omitted.
    #[arg(long, value_delimiter = ',')]
    index: Vec<usize>,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long = "T", default_value_t = 5)]
    t: usize,
    #[arg(long, default_value_t = 16)]
    h: usize,
    #[arg(long, default_value_t = 16)]
    w: usize,
    #[arg(long, default_value_t = 32)]
    channels: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for numeric failures, 1 for everything else.
fn exit_code(e: &CatrError) -> u8 {
    match e {
        CatrError::Numeric(_) => 2,
        _ => 1,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Gradcheck => gradcheck_cmd(),
        Command::BenchAttn(a) => bench_cmd(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = GenConfig::default();
    if let Some(p) = a.multi_source {
        cfg.multi_source = p;
    }
    cfg.frames = a.frames.unwrap_or(cfg.frames);
    cfg.height = a.height.unwrap_or(cfg.height);
    cfg.width = a.width.unwrap_or(cfg.width);
    cfg.validate()?;
    if a.n == 0 {
        return Err(CatrError::Validation("--n must be at least 1".into()));
    }
    let samples = generate(&cfg, &sample_seeds(a.seed, a.n))?;
    write_dataset(&samples, &a.out)?;
    let path = a.out.join("generator.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg)?).map_err(|e| CatrError::Io { path, source: e })?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn load_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::preset(&a.preset)?,
    };
    if let Some(d) = &a.data {
        cfg.data.train_dir = Some(d.clone());
    }
    if let Some(d) = &a.eval_data {
        cfg.data.eval_dir = Some(d.clone());
    }
    if let Some(d) = &a.out {
        cfg.data.out_dir = Some(d.clone());
    }
    if let Some(s) = a.steps {
        cfg.optim.steps = s;
    }
    if let Some(k) = a.checkpoint_every {
        cfg.optim.checkpoint_every = k;
    }
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let cfg = load_config(&a)?;
    let train_dir = cfg
        .data
        .train_dir
        .clone()
        .ok_or_else(|| CatrError::Validation("no training data: pass --data or set data.train_dir".into()))?;
    let out_dir = cfg.data.out_dir.clone().unwrap_or_else(|| PathBuf::from("run"));
    // read the held-out set first so a bad path fails before any compute
    let eval_set = cfg.data.eval_dir.as_deref().map(read_dataset).transpose()?;
    let data = read_dataset(&train_dir)?;
    eprintln!(
        "training on {} samples for {} steps (batch {}, seed {})",
        data.len(),
        cfg.optim.steps,
        cfg.optim.batch_size,
        cfg.optim.seed
    );
    let start = Instant::now();
    let every = a.log_every;
    let outcome = train(&cfg, &data, &TrainOutputs { dir: Some(out_dir.clone()) }, &mut |r| {
        if every > 0 && (r.step % every == 0 || r.step + 1 == cfg.optim.steps) {
            eprintln!(
                "step {:>5}  total {:.4}  dice {:.4}  focal {:.4}  ref {:.4}  [{:.0?}]",
                r.step,
                r.total,
                r.dice,
                r.focal,
                r.reference,
                start.elapsed()
            );
        }
    })?;
    println!("checkpoint: {}", out_dir.join("final").display());
    if let Some(set) = eval_set {
        let report = catr_core::train::evaluate_model(&outcome.model, &set)?;
        let path = out_dir.join("eval.json");
        fs::write(&path, serde_json::to_string_pretty(&report)?).map_err(|e| CatrError::Io { path, source: e })?;
        println!("held-out M_J {:.4}  M_F {:.4}", report.m_j, report.m_f);
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let model = Catr::load(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    let mut preds = Vec::with_capacity(data.len());
    for s in &data {
        preds.push(predict(&model, &s.video, &s.audio)?.selection.masks);
    }
    let gts: Vec<_> = data.iter().map(|s| s.gt.masks.clone()).collect();
    let report = evaluate(&preds, &gts)?;
    let text = serde_json::to_string_pretty(&report)?;
    match &a.report {
        Some(path) => {
            fs::write(path, &text).map_err(|e| CatrError::Io { path: path.clone(), source: e })?;
            println!("M_J {:.4}  M_F {:.4}  ({} videos)", report.m_j, report.m_f, data.len());
        }
        None => println!("{text}"),
    }
    Ok(())
}

const OVERLAY_COLOR: [f64; 3] = [1.0, 0.15, 0.1];

fn infer_cmd(a: InferArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.alpha) {
        return Err(CatrError::Validation("--alpha must lie in [0, 1]".into()));
    }
    let model = Catr::load(&a.ckpt)?;
    let data = read_dataset(&a.data)?;
    let indices: Vec<usize> = if a.index.is_empty() { (0..data.len()).collect() } else { a.index.clone() };
    for &i in &indices {
        let s = data
            .get(i)
            .ok_or_else(|| CatrError::Validation(format!("sample {i} out of range ({} samples)", data.len())))?;
        let pred = predict(&model, &s.video, &s.audio)?;
        let dir = a.out.join(format!("s{i:05}"));
        fs::create_dir_all(&dir).map_err(|e| CatrError::Io { path: dir.clone(), source: e })?;
        let masks = &pred.selection.masks;
        let (t, h, w) = (masks.shape()[0], masks.shape()[1], masks.shape()[2]);
        for f in 0..t {
            let m = &masks.data()[f * h * w..(f + 1) * h * w];
            let frame = &s.video.data()[f * h * w * 3..(f + 1) * h * w * 3];
            image::write_mask(&dir.join(format!("mask_{f:03}.png")), w, h, m)?;
            let blended = overlay(frame, m, OVERLAY_COLOR, a.alpha);
            image::write_rgb(&dir.join(format!("overlay_{f:03}.png")), w, h, &blended)?;
        }
        write_selection(&dir, &pred)?;
    }
    println!("wrote {} samples to {}", indices.len(), a.out.display());
    Ok(())
}

fn write_selection(dir: &Path, pred: &catr_core::train::Prediction) -> Result<()> {
    let info = serde_json::json!({
        "query": pred.selection.index,
        "scores": pred.selection.scores,
    });
    let path = dir.join("selection.json");
    fs::write(&path, serde_json::to_string_pretty(&info)?).map_err(|e| CatrError::Io { path, source: e })
}

fn gradcheck_cmd() -> Result<()> {
    let report = run_suite(&registry(), EPS, TOLERANCE);
    print!("{}", report.render());
    if report.passed() {
        Ok(())
    } else {
        Err(CatrError::Numeric(format!("gradient check failed (worst {:.3e})", report.worst())))
    }
}

fn bench_cmd(a: BenchArgs) -> Result<()> {
    let cfg = MeasureConfig::new(a.t, a.h, a.w, a.channels, a.heads);
    let row = cost_row(&cfg)?;
    let c = &row.cost;
    println!("T={} h={} w={} (P={})", c.t, c.h, c.w, c.h * c.w);
    println!("joint       {:>14}  score entries, (T(P+1))^2", c.joint);
    println!("spatial     {:>14}", c.spatial);
    println!("temporal AV {:>14}", c.tav);
    println!("temporal VA {:>14}", c.tva);
    println!("decoupled   {:>14}", c.decoupled());
    println!("ratio       {:>14.4}", c.ratio());
    println!("literal (P+T)^2 reading: {}", c.literal_joint());
    let show = |x: Option<u64>| x.map_or_else(|| "skipped (over memory limit)".to_string(), |b| format!("{b} bytes"));
    println!("measured peak score buffer: joint {}, decoupled {}", show(row.measured_joint), show(row.measured_decoupled));
    if let Some(path) = &a.csv {
        write_csv(std::slice::from_ref(&row), path)?;
        println!("csv: {}", path.display());
    }
    Ok(())
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use catr_core::config::RunConfig;
use catr_core::data::{generate, sample_seeds, write_dataset, GenConfig};

fn catr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_catr")).args(args).env_remove("CATR_SEED").output().expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
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
    let path = dir.join("tiny.json");
    cfg.save(&path).unwrap();
    path
}

fn gen_tiny(dir: &Path, seed: &str) -> Output {
    let out = dir.to_str().unwrap();
    catr(&["gen-data", "--out", out, "--n", "3", "--seed", seed, "--frames", "2", "--height", "16", "--width", "16"])
}

fn tiny_gen_config() -> GenConfig {
    GenConfig { frames: 2, height: 16, width: 16, min_radius: 3.0, max_radius: 5.0, max_shapes: 2, ..GenConfig::default() }
}

#[test]
fn gen_data_writes_a_readable_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    // the default radii do not fit a 16×16 frame
    let out = gen_tiny(&dir, "4");
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));
    let out = catr(&["gen-data", "--out", dir.to_str().unwrap(), "--n", "4", "--seed", "4"]);
    assert_eq!(code(&out), 0);
    assert_eq!(catr_core::data::read_dataset(&dir).unwrap().len(), 4);
    assert!(dir.join("generator.json").exists());
}

#[test]
fn train_eval_infer_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&generate(&tiny_gen_config(), &sample_seeds(5, 3)).unwrap(), &data).unwrap();
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    let args = ["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap()];
    let out = catr(&[&args[..], &["--out", run.to_str().unwrap(), "--eval-data", data.to_str().unwrap()]].concat());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("M_J"));
    let log = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(log.lines().next(), Some("step,dice,focal,ref,total"));

    // identical seeds give identical logs; CATR_SEED changes them
    let again = tmp.path().join("again");
    catr(&[&args[..], &["--out", again.to_str().unwrap()]].concat());
    assert_eq!(log, fs::read_to_string(again.join("loss.csv")).unwrap());
    let reseeded = tmp.path().join("reseeded");
    let out = Command::new(env!("CARGO_BIN_EXE_catr"))
        .args([&args[..], &["--out", reseeded.to_str().unwrap()]].concat())
        .env("CATR_SEED", "9")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0);
    assert_ne!(log, fs::read_to_string(reseeded.join("loss.csv")).unwrap());
    assert!(fs::read_to_string(reseeded.join("config.json")).unwrap().contains("\"seed\": 9"));

    let ckpt = run.join("final");
    let report = tmp.path().join("report.json");
    let out = catr(&["eval", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--report", report.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    // the report from eval matches the one written right after training
    let a: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let b: serde_json::Value = serde_json::from_str(&fs::read_to_string(run.join("eval.json")).unwrap()).unwrap();
    assert_eq!(a, b);

    let infer = |dir: &Path| {
        catr(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", dir.to_str().unwrap(), "--index", "0,2"])
    };
    let (first, second) = (tmp.path().join("inf1"), tmp.path().join("inf2"));
    assert_eq!(code(&infer(&first)), 0);
    assert_eq!(code(&infer(&second)), 0);
    for name in ["mask_000.png", "mask_001.png", "overlay_000.png", "overlay_001.png", "selection.json"] {
        let (x, y) = (fs::read(first.join("s00002").join(name)).unwrap(), fs::read(second.join("s00002").join(name)).unwrap());
        assert_eq!(x, y, "{name} differs");
    }
    assert!(!first.join("s00001").exists());
    let out = catr(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", first.to_str().unwrap(), "--index", "7"]);
    assert_eq!(code(&out), 1);
}

#[test]
fn infer_rejects_data_that_does_not_match_the_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    write_dataset(&generate(&tiny_gen_config(), &sample_seeds(6, 2)).unwrap(), &data).unwrap();
    let other = tmp.path().join("other");
    let g = GenConfig { frames: 3, ..tiny_gen_config() };
    write_dataset(&generate(&g, &sample_seeds(6, 1)).unwrap(), &other).unwrap();
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    let out = catr(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap(), "--steps", "1"]);
    assert_eq!(code(&out), 0);
    let ckpt = run.join("final");
    let out = catr(&["infer", "--ckpt", ckpt.to_str().unwrap(), "--data", other.to_str().unwrap(), "--out", tmp.path().join("x").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    // training on mismatched data is a validation error as well
    let out = catr(&["train", "--config", cfg.to_str().unwrap(), "--data", other.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
}

#[test]
fn invalid_configs_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let text = fs::read_to_string(&cfg).unwrap().replacen("\"optim\": {", "\"optim\": {\n    \"learning_rate\": 0.1,", 1);
    let bad = tmp.path().join("bad.json");
    fs::write(&bad, text).unwrap();
    let out = catr(&["train", "--config", bad.to_str().unwrap(), "--data", "nowhere"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    let zero = fs::read_to_string(&cfg).unwrap().replace("\"batch_size\": 2", "\"batch_size\": 0");
    fs::write(&bad, zero).unwrap();
    assert_eq!(code(&catr(&["train", "--config", bad.to_str().unwrap(), "--data", "nowhere"])), 1);
    assert_eq!(code(&catr(&["train", "--preset", "huge", "--data", "nowhere"])), 1);
    assert_eq!(code(&catr(&["no-such-command"])), 1);
    let out = Command::new(env!("CARGO_BIN_EXE_catr"))
        .args(["train", "--config", cfg.to_str().unwrap(), "--data", "nowhere"])
        .env("CATR_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(code(&out), 1);
}

#[test]
fn non_finite_training_exits_with_two_and_dumps_the_batch() {
    let tmp = tempfile::tempdir().unwrap();
    let mut samples = generate(&tiny_gen_config(), &sample_seeds(8, 2)).unwrap();
    for s in &mut samples {
        s.audio.data_mut()[3] = f64::INFINITY;
    }
    let data = tmp.path().join("data");
    write_dataset(&samples, &data).unwrap();
    let cfg = tiny_config(tmp.path());
    let run = tmp.path().join("run");
    let out = catr(&["train", "--config", cfg.to_str().unwrap(), "--data", data.to_str().unwrap(), "--out", run.to_str().unwrap()]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("nan-step000000").join("batch.json").exists());
}

#[test]
fn gradcheck_passes_and_lists_the_modules() {
    let out = catr(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stdout(&out));
    let text = stdout(&out);
    for name in ["softmax", "DAVT block", "gate_fold (2 blocks)", "query decoder", "training_loss"] {
        assert!(text.contains(name), "missing {name}");
    }
    assert!(text.contains("0 failed"));
}

#[test]
fn bench_attn_prints_and_writes_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("cost.csv");
    let out = catr(&["bench-attn", "--T", "5", "--h", "8", "--w", "8", "--csv", csv.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    assert!(text.contains("literal (P+T)^2 reading: 4761"), "{text}");
    let rows = fs::read_to_string(&csv).unwrap();
    let mut lines = rows.lines();
    assert_eq!(lines.next(), Some("T,h,w,joint,spatial,tav,tva,ratio,measured_joint,measured_decoupled"));
    let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(&fields[..4], &["5", "8", "8", "105625"]);
    assert_eq!(code(&catr(&["bench-attn", "--T", "0"])), 1);
}

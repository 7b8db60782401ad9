use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
d_model = 16
n_layers = 2
d_state = 4
headdim = 8
n_heads = 4
n_groups = 2
lora_rank = 2
lora_alpha = 4.0
text_vocab_size = 32
image_vocab_size = 8
vision_dim = 8
chunk_len = 4

[train]
train_examples = 40
val_examples = 6

[train.stage1_mmu]
peak_lr = 1e-3
warmup_steps = 2
total_steps = 6
mmu_batch = 2
t2i_batch = 0

[train.stage1_t2i]
peak_lr = 8e-4
warmup_steps = 2
total_steps = 6
mmu_batch = 0
t2i_batch = 2

[train.stage2]
peak_lr = 1e-4
warmup_steps = 0
total_steps = 6
mmu_batch = 1
t2i_batch = 2
"#;

fn ommx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ommx"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ommx(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn setup(dir: &Path) -> String {
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    let cfg = cfg.to_str().unwrap().to_owned();
    ok(&["gen-data", "--config", &cfg, "--out", dir.to_str().unwrap()]);
    cfg
}

fn train(cfg: &str, out: &Path, stage: &str) {
    ok(&[
        "train",
        "--stage",
        stage,
        "--config",
        cfg,
        "--out",
        out.to_str().unwrap(),
        "--strict-determinism",
        "true",
    ]);
}

#[test]
fn gen_data_writes_dataset_and_vocabulary() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let train = fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    assert_eq!(train.lines().count(), 80);
    let first: serde_json::Value = serde_json::from_str(train.lines().next().unwrap()).unwrap();
    assert!(first["caption"].is_string() && first["grid"].is_array());
    let vocab = fs::read_to_string(dir.path().join("tokenizer.txt")).unwrap();
    assert!(vocab.lines().any(|w| w == "background"));
}

#[test]
fn full_schedule_eval_and_generate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    for stage in ["1mmu", "1t2i", "2"] {
        train(&cfg, dir.path(), stage);
    }
    let metrics = fs::read_to_string(dir.path().join("metrics_2.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6);
    let rec: serde_json::Value = serde_json::from_str(metrics.lines().last().unwrap()).unwrap();
    for key in ["step", "stage", "lr", "mmu_loss", "t2i_loss", "grad_norm", "wall_ms"] {
        assert!(rec.get(key).is_some(), "missing {key}");
    }
    assert_eq!(rec["lr"].as_f64(), Some(0.0));

    let ckpt = dir.path().join("stage2.ckpt");
    let ckpt = ckpt.to_str().unwrap();
    let report = ok(&["eval", "--config", &cfg, "--checkpoint", ckpt, "--out", dir.path().to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    assert_eq!(v["mmu_total"], 6);
    assert_eq!(v["out_of_modality"], 0);

    let out = ommx(&["generate", "--config", &cfg, "--checkpoint", ckpt, "--caption", "uniform red"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    if out.status.success() {
        assert_eq!(stdout.lines().count(), 4);
    } else {
        assert_eq!(String::from_utf8_lossy(&out.stderr).trim().lines().count(), 1);
    }
    let out = ommx(&["generate", "--config", &cfg, "--checkpoint", ckpt, "--image", "RRRRRRRRRRRRRRRG"]);
    if !out.status.success() {
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    }
}

#[test]
fn identical_seeds_give_identical_checkpoints() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = setup(a.path());
    setup(b.path());
    train(&cfg, a.path(), "1t2i");
    train(&cfg, b.path(), "1t2i");
    let x = fs::read(a.path().join("stage1_t2i.ckpt")).unwrap();
    let y = fs::read(b.path().join("stage1_t2i.ckpt")).unwrap();
    assert_eq!(x, y);
    assert_eq!(
        fs::read(a.path().join("metrics_1t2i.jsonl")).unwrap(),
        fs::read(b.path().join("metrics_1t2i.jsonl")).unwrap()
    );
}

#[test]
fn stage_two_names_the_missing_branch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let out = ommx(&["train", "--stage", "2", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("MMU branch"), "{err}");
    assert_eq!(err.trim().lines().count(), 1);

    train(&cfg, dir.path(), "1mmu");
    let out = ommx(&["train", "--stage", "2", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(String::from_utf8_lossy(&out.stderr).contains("T2I branch"));
}

#[test]
fn usage_errors_exit_with_code_two() {
    let out = ommx(&["train", "--stage", "3"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ommx(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bad_config_is_a_one_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[model]\nd_modle = 4\n").unwrap();
    let out = ommx(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("d_modle"), "{err}");
}

#[test]
fn bench_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    ok(&[
        "bench", "--config", &cfg, "--out", dir.path().to_str().unwrap(), "--lens", "8,16", "--reps", "1",
    ]);
    let csv = fs::read_to_string(dir.path().join("bench.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("len,ssm_tok_per_s,attn_tok_per_s,ssm_state_bytes,attn_cache_bytes")
    );
    assert_eq!(lines.count(), 2);
}

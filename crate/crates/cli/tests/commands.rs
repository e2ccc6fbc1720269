use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set", "data.num_clips=3",
    "--set", "data.val_clips=2",
    "--set", "data.clip_length=4",
    "--set", "train.epochs=1",
    "--set", "train.pairs_per_clip=1",
];

fn crossvis(root: &Path, args: &[&str]) -> Output {
    let data = format!("data.root={}", root.join("data").display());
    Command::new(env!("CARGO_BIN_EXE_crossvis"))
        .args(args)
        .args(TINY)
        .args(["--set", &data])
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> String {
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(out.status.success(), "exit {:?}: {stderr}", out.status);
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn generate_train_eval_infer() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let run = root.join("run");
    let run_s = run.to_str().unwrap();

    let gen = ok(crossvis(root, &["generate"]));
    assert!(gen.contains("3 train clips"), "{gen}");
    assert!(root.join("data/train/manifest.json").exists());
    assert!(root.join("data/val/manifest.json").exists());

    let train = ok(crossvis(root, &["train", "--seed", "5", "--out", run_s]));
    assert!(train.contains("epoch 1"), "{train}");
    let ckpt = run.join("checkpoint.bin");
    assert!(ckpt.exists() && run.join("metrics.jsonl").exists());
    let ckpt_s = ckpt.to_str().unwrap();

    let eval = ok(crossvis(root, &["eval", "--checkpoint", ckpt_s, "--out", run_s]));
    assert!(eval.starts_with("AP "), "{eval}");

    let infer = root.join("infer");
    let infer_s = infer.to_str().unwrap();
    ok(crossvis(root, &["infer", "--checkpoint", ckpt_s, "--clip", "clip_0000", "--overlays", "--out", infer_s]));
    assert!(infer.join("predictions.json").exists());
    assert!(infer.join("overlay_0003.png").exists());

    // nothing clears a threshold of 1
    let strict = root.join("strict");
    let strict_s = strict.to_str().unwrap();
    let out = crossvis(
        root,
        &["infer", "--checkpoint", ckpt_s, "--clip", "clip_0001", "--set", "detect.score_threshold=1.0", "--out", strict_s],
    );
    assert!(ok(out).starts_with("0 tracks"));
    let dump: serde_json::Value = serde_json::from_slice(&std::fs::read(strict.join("predictions.json")).unwrap()).unwrap();
    assert_eq!(dump["clip_0001"], serde_json::json!([]));

    let missing = crossvis(root, &["infer", "--checkpoint", ckpt_s, "--clip", "clip_9999", "--out", infer_s]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("clip_9999"));
}

#[test]
fn train_without_corpus_says_so() {
    let dir = tempfile::tempdir().unwrap();
    let out = crossvis(dir.path(), &["train", "--out", dir.path().join("run").to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("generate"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = crossvis(dir.path(), &["generate", "--set", "data.num_clipz=3"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn config_file_and_seed_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[data]\nnum_clips = 2\n").unwrap();
    let out = ok(crossvis(dir.path(), &["generate", "--config", cfg.to_str().unwrap(), "--seed", "9"]));
    // --set after --config still wins
    assert!(out.contains("3 train clips"), "{out}");
}

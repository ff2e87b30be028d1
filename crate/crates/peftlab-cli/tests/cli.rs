//! CLI-level behavior: determinism of artifacts, exit codes, config
//! handling.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_peftlab"))
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.toml");
    std::fs::write(
        &path,
        "[data]\nn_images = 8\n\n[vqa]\nd_model = 32\nn_heads = 2\nbatch_size = 4\naccumulation_steps = 1\n\n[eval]\ngen_count = 4\neval_batch = 4\n",
    )
    .unwrap();
    path
}

#[test]
fn gen_data_is_deterministic_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for out in ["a", "b"] {
        let status = bin()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .arg("--out-dir")
            .arg(dir.path().join(out))
            .status()
            .unwrap();
        assert!(status.success());
    }
    for rel in [
        "corpus/qa.jsonl",
        "corpus/vocab.txt",
        "corpus/images/img_00000.png",
    ] {
        let a = std::fs::read(dir.path().join("a").join(rel)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(rel)).unwrap();
        assert_eq!(a, b, "{rel} differs");
    }
}

#[test]
fn seed_override_changes_the_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for (out, seed) in [("s0", "0"), ("s5", "5")] {
        let status = bin()
            .args(["gen-data", "--config"])
            .arg(&cfg)
            .arg("--out-dir")
            .arg(dir.path().join(out))
            .args(["--seed", seed])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(dir.path().join("s0/corpus/images/img_00000.png")).unwrap();
    let b = std::fs::read(dir.path().join("s5/corpus/images/img_00000.png")).unwrap();
    assert_ne!(a, b);
}

#[test]
fn print_config_emits_parseable_defaults() {
    let out = bin().arg("print-config").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let value: toml::Value = toml::from_str(&text).unwrap();
    assert_eq!(value["vqa"]["learning_rate"].as_float(), Some(2e-5));
    assert_eq!(value["vqa"]["warmup_steps"].as_integer(), Some(200));
    assert_eq!(value["diffusion"]["learning_rate"].as_float(), Some(1e-4));
    assert_eq!(value["diffusion"]["warmup_steps"].as_integer(), Some(500));
    assert_eq!(value["diffusion"]["rank"].as_integer(), Some(4));
    assert_eq!(value["vqa"]["weight_decay"].as_float(), Some(0.01));
}

#[test]
fn usage_errors_exit_with_code_two() {
    // Missing --out-dir.
    let out = bin().arg("gen-data").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    // Missing config file.
    let out = bin()
        .args([
            "gen-data",
            "--config",
            "/definitely/not/here.toml",
            "--out-dir",
            "/tmp/x",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    // Unknown key in config.
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[data]\nnope = 3\n").unwrap();
    let out = bin()
        .args(["gen-data", "--config"])
        .arg(&bad)
        .arg("--out-dir")
        .arg(dir.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    // Unknown subcommand (clap).
    let out = bin().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_code_one() {
    let dir = tempfile::tempdir().unwrap();
    // train-vqa without a corpus is a runtime failure.
    let out = bin()
        .arg("train-vqa")
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("gen-data"), "unhelpful error: {stderr}");

    // report with no metric CSVs has nothing to merge.
    let out = bin()
        .arg("report")
        .arg("--out-dir")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn eval_vqa_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("run");
    for (cmd, extra) in [("gen-data", None), ("train-vqa", Some(["--epochs", "1"]))] {
        let mut c = bin();
        c.arg(cmd)
            .arg("--config")
            .arg(&cfg)
            .arg("--out-dir")
            .arg(&out_dir);
        if let Some(args) = extra {
            c.args(args);
        }
        assert!(c.status().unwrap().success(), "{cmd} failed");
    }
    let run_eval = || {
        let status = bin()
            .arg("eval-vqa")
            .arg("--config")
            .arg(&cfg)
            .arg("--out-dir")
            .arg(&out_dir)
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(out_dir.join("vqa_eval/metrics.csv")).unwrap()
    };
    let first = run_eval();
    let second = run_eval();
    assert_eq!(first, second);
}

use std::path::Path;
use std::process::{Command, Output};

fn tsaflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tsaflow")).args(args).output().unwrap()
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: &str = r#"{
  "steps": 3,
  "warmup_steps": 1,
  "model": {
    "encoder_channels": [4, 6, 8],
    "occ_channels": 2,
    "attention_dim": 4,
    "refiner": { "hidden": 4, "context": 3, "motion": 4, "radius": 1, "head": 3, "iters": 2 }
  }
}"#;

#[test]
fn gen_train_eval_dump_round() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.tsa");
    let cfg = dir.path().join("tiny.json");
    let ckpt = dir.path().join("m.tsac");
    std::fs::write(&cfg, TINY).unwrap();

    let out = ok(&tsaflow(&[
        "gen",
        "--count",
        "3",
        "--size",
        "32",
        "--seed",
        "5",
        "--out",
        s(&data),
    ]));
    assert!(out.contains("wrote 3 samples"));
    let out = ok(&tsaflow(&[
        "train",
        "--config",
        s(&cfg),
        "--train-data",
        s(&data),
        "--out",
        s(&ckpt),
    ]));
    assert!(out.contains("trained 3 steps"), "{out}");
    assert!(dir.path().join("m.log.csv").exists());

    let eval_dir = dir.path().join("eval");
    let out = ok(&tsaflow(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--out-dir",
        s(&eval_dir),
    ]));
    assert!(out.contains("aepe_all:"));
    for f in ["eval_per_image.csv", "eval_summary.csv", "eval_scatter.csv"] {
        assert!(eval_dir.join(f).exists(), "{f} missing");
    }

    let dump = dir.path().join("q");
    let out = ok(&tsaflow(&[
        "dump-attn",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&data),
        "--image",
        "1",
        "--query",
        "2,1",
        "--out",
        s(&dump),
        "--om",
    ]));
    assert!(out.starts_with("query (2,1)"));
    let pgm = std::fs::read(dir.path().join("q.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n4 4\n65535\n"));
    assert!(dir.path().join("q_om.pgm").exists());
    let csv = std::fs::read_to_string(dir.path().join("q.csv")).unwrap();
    let total: f64 = csv
        .lines()
        .skip(1)
        .map(|l| l.rsplit(',').next().unwrap().parse::<f64>().unwrap())
        .sum();
    assert!((total - 1.0).abs() < 1e-4, "row sums to {total}");
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.tsa");
    let ckpt = dir.path().join("m.tsac");
    let out = tsaflow(&[
        "eval",
        "--ckpt",
        s(&ckpt),
        "--data",
        s(&missing),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("does not exist"));

    let out = tsaflow(&["gen", "--count", "1", "--out", s(&missing), "--frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    let out = tsaflow(&["train", "--steps", "5", "--out", s(&ckpt)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--train-data"));
    let out = tsaflow(&["gen", "--count", "1", "--size", "30", "--out", s(&missing)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn corrupted_dataset_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.tsa");
    ok(&tsaflow(&[
        "gen",
        "--count",
        "1",
        "--size",
        "32",
        "--unaligned",
        "--max-translation",
        "6",
        "--out",
        s(&data),
    ]));
    let mut bytes = std::fs::read(&data).unwrap();
    let n = bytes.len();
    bytes[n - 9] ^= 1;
    std::fs::write(&data, &bytes).unwrap();
    let out = tsaflow(&[
        "train",
        "--steps",
        "1",
        "--train-data",
        s(&data),
        "--out",
        s(&dir.path().join("m.tsac")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("checksum"));
}

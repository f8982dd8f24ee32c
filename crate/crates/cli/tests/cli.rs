use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn msn(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_msn"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("spawn msn")
}

fn ok(args: &[&str], dir: &Path) -> String {
    let out = msn(args, dir);
    assert!(
        out.status.success(),
        "msn {args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str], dir: &Path) -> i32 {
    msn(args, dir).status.code().expect("exit code")
}

fn summary(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

const TINY_DATA: [&str; 10] = [
    "--set",
    "data.latents.seq_len=16",
    "--set",
    "data.latents.dim=8",
    "--set",
    "data.n_per_class=2",
    "--set",
    "data.heldout_per_class=2",
    "--set",
    "data.pairs.n_pairs=8",
];

const SUBCOMMANDS: [&str; 11] = [
    "gen-data",
    "train-tokenizer",
    "encode",
    "decode",
    "train-lm",
    "generate",
    "eval-recon",
    "eval-fad",
    "compare",
    "grad-check",
    "report",
];

#[test]
fn help_and_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&["--help"], d), 0);
    assert_eq!(code(&["--version"], d), 0);
    for sub in SUBCOMMANDS {
        assert_eq!(code(&[sub, "--help"], d), 0, "{sub} --help");
    }
    assert_eq!(code(&[], d), 1);
    assert_eq!(code(&["gen-data", "--bogus"], d), 1);
    assert_eq!(code(&["gen-data", "--set", "data.nonsense=1"], d), 1);
    assert_eq!(code(&["gen-data", "--set", "data.n_per_class=many"], d), 1);
    assert_eq!(
        code(&["train-tokenizer", "--objective", "l1", "--data", "x"], d),
        1
    );
    assert_eq!(
        code(
            &[
                "encode",
                "--model",
                "missing.msnc",
                "--data",
                "missing.msnl"
            ],
            d
        ),
        2
    );
}

#[test]
fn grad_check_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = ok(&["grad-check", "--out", "gc"], d);
    assert!(out.contains("matmul"), "{out}");
    assert!(out.contains("transformer_block"), "{out}");
    let out = ok(&["report", "--out", "rep"], d);
    assert!(
        out.contains("279.5 bps") && out.contains("0.23 kbps"),
        "{out}"
    );
    let s = summary(d.join("rep/report.summary.json"));
    assert_eq!(s["command"], "report");
    assert_eq!(s["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn tokenizer_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["gen-data", "--out", "data", "--seed", "2"];
    args.extend(TINY_DATA);
    ok(&args, d);
    for f in [
        "train.msnl",
        "heldout.msnl",
        "pairs.jsonl",
        "gen-data.config.json",
        "gen-data.summary.json",
    ] {
        assert!(d.join("data").join(f).exists(), "{f}");
    }

    for obj in ["fm", "mse"] {
        ok(
            &[
                "train-tokenizer",
                "--objective",
                obj,
                "--data",
                "data/train.msnl",
                "--out",
                "m",
                "--set",
                "preset=toy",
                "--set",
                "tokenizer.max_steps=5",
            ],
            d,
        );
        let s = summary(d.join(format!("m/train-tokenizer-{obj}.summary.json")));
        assert_eq!(s["config_hash"].as_str().unwrap().len(), 64);
        assert!(d
            .join(format!("m/train-tokenizer-{obj}.metrics.csv"))
            .exists());
    }
    let cfg = summary(d.join("m/train-tokenizer-fm.config.json"));
    assert_eq!(cfg["tokenizer.max_steps"], 5);
    assert_eq!(cfg["tokenizer.seq_len"], 16);

    ok(
        &[
            "encode",
            "--model",
            "m/tokenizer_fm.msnc",
            "--data",
            "data/heldout.msnl",
            "--out",
            "enc",
        ],
        d,
    );
    let lines = std::fs::read_to_string(d.join("enc/tokens.jsonl")).unwrap();
    let first: Value = serde_json::from_str(lines.lines().next().unwrap()).unwrap();
    assert_eq!(first["tokens"].as_array().unwrap().len(), 16);
    assert_eq!(lines.lines().count(), 8);

    ok(
        &[
            "decode",
            "--model",
            "m/tokenizer_fm.msnc",
            "--tokens",
            "enc/tokens.jsonl",
            "--steps",
            "4",
            "--out",
            "dec",
        ],
        d,
    );
    assert!(d.join("dec/decoded.msnl").exists());

    ok(
        &[
            "eval-recon",
            "--model",
            "m/tokenizer_mse.msnc",
            "--data",
            "data/heldout.msnl",
            "--steps",
            "4",
            "--out",
            "ev",
        ],
        d,
    );
    let s = summary(d.join("ev/eval-recon.summary.json"));
    assert!(s["results"]["recon_mse"].as_f64().unwrap() >= 0.0);

    ok(
        &[
            "eval-fad",
            "--model",
            "m/tokenizer_fm.msnc",
            "--data",
            "data/heldout.msnl",
            "--steps",
            "4",
            "--out",
            "ev",
        ],
        d,
    );
    let s = summary(d.join("ev/eval-fad.summary.json"));
    assert!(s["results"]["frechet"].as_f64().unwrap() >= 0.0);

    let csv = ok(
        &[
            "compare",
            "--fm",
            "m/tokenizer_fm.msnc",
            "--mse",
            "m/tokenizer_mse.msnc",
            "--split",
            "heldout=data/heldout.msnl",
            "--steps",
            "4",
            "--out",
            "cmp",
        ],
        d,
    );
    assert_eq!(
        csv,
        std::fs::read_to_string(d.join("cmp/compare.csv")).unwrap()
    );
    assert!(csv.lines().count() > 1);
}

#[test]
fn lm_train_then_generate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut args = vec!["gen-data", "--out", "data"];
    args.extend(TINY_DATA);
    ok(&args, d);
    let tiny = [
        "--set",
        "lm.model.hidden_dim=16",
        "--set",
        "lm.model.n_blocks=1",
        "--set",
        "lm.model.head_dim=8",
        "--set",
        "lm.base.epochs=1",
        "--set",
        "lm.train.epochs=2",
        "--set",
        "lm.lora.rank=2",
    ];
    let mut args = vec![
        "train-lm",
        "--stage",
        "pretrain",
        "--pairs",
        "data/pairs.jsonl",
        "--out",
        "lm",
    ];
    args.extend(tiny);
    ok(&args, d);
    let s = summary(d.join("lm/train-lm-pretrain.summary.json"));
    assert!(s["results"]["accuracy_all"].as_f64().is_some(), "{s}");

    ok(
        &[
            "train-lm",
            "--stage",
            "finetune",
            "--pairs",
            "data/pairs.jsonl",
            "--init",
            "lm/lm.msnc",
            "--out",
            "ft",
            "--set",
            "lm.train.epochs=1",
        ],
        d,
    );

    ok(
        &[
            "generate",
            "--model",
            "ft/lm.msnc",
            "--prompt-text",
            "A dog",
            "--max-len",
            "12",
            "--samples",
            "3",
            "--seed",
            "4",
            "--out",
            "gen",
        ],
        d,
    );
    let gens = std::fs::read_to_string(d.join("gen/generations.jsonl")).unwrap();
    assert_eq!(gens.lines().count(), 3);
    ok(
        &[
            "generate",
            "--model",
            "ft/lm.msnc",
            "--prompt-audio",
            "1,2,3",
            "--max-len",
            "4",
            "--out",
            "gen2",
        ],
        d,
    );
    assert_eq!(
        code(&["generate", "--model", "ft/lm.msnc", "--out", "gen3"], d),
        1
    );
}

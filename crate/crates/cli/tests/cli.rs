use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tt"))
        .args(args)
        .current_dir(dir)
        .env_remove("TT_SEED")
        .output()
        .expect("spawn tt")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

const TINY: &[&str] = &[
    "--num-sentences",
    "40",
    "--epochs",
    "1",
    "--d",
    "8",
    "--d-prime",
    "8",
    "--heads",
    "2",
    "--ffn-width",
    "8",
];

#[test]
fn bench_prints_csv_with_exact_macs() {
    let dir = tempfile::tempdir().unwrap();
    let o = tt(
        &["bench", "--sweep-n", "8", "--sweep-b", "2", "--sweep-w", "1,3", "--reps", "1", "--d-prime", "8", "--heads", "2"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("mode,n,b,w,heads,d_prime,score_macs,value_macs,median_ms"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    // stripe, n=8, b=2, w=3: 64 queries x 36 keys x 8 channels
    let stripe = rows.iter().find(|r| r[0] == "stripe" && r[3] == "3").unwrap();
    assert_eq!(stripe[6], (64 * 36 * 8).to_string());
    let full = rows.iter().find(|r| r[0] == "full" && r[3] == "3").unwrap();
    assert_eq!(full[6], (64 * 64 * 8).to_string());
}

#[test]
fn bad_geometry_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    // even window
    let o = tt(&["bench", "--sweep-n", "8", "--sweep-w", "2", "--reps", "1"], dir.path());
    assert_eq!(code(&o), 2);
    let o = tt(&["train", "--w", "4"], dir.path());
    assert_eq!(code(&o), 2);
    let o = tt(&["train", "--num-layers", "3"], dir.path());
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_errors_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.json");
    fs::write(&p, r#"{"no_such_field": 1}"#).unwrap();
    let o = tt(&["gen-data", "--out", "x.jsonl", "--config", p.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 2);

    let p = dir.path().join("cfg.json");
    fs::write(&p, r#"{"synth": {"num_sentences": 7, "seed": 3}}"#).unwrap();
    let o = tt(&["gen-data", "--out", "a.jsonl", "--config", p.to_str().unwrap()], dir.path());
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(dir.path().join("a.jsonl")).unwrap().lines().count(), 7);
    // flag beats file
    let o = tt(
        &["gen-data", "--out", "b.jsonl", "--config", p.to_str().unwrap(), "--num-sentences", "5"],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_to_string(dir.path().join("b.jsonl")).unwrap().lines().count(), 5);
}

#[test]
fn missing_or_malformed_data_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let o = tt(&["train", "--train-path", "nope.jsonl"], dir.path());
    assert_eq!(code(&o), 3);
    fs::write(dir.path().join("bad.txt"), "a b c####[([0], [9], 'POS')]\n").unwrap();
    let o = tt(&["train", "--train-path", "bad.txt"], dir.path());
    assert_eq!(code(&o), 3);
    let o = tt(&["eval", "--checkpoint", "missing.ckpt"], dir.path());
    assert_eq!(code(&o), 3);
}

#[test]
fn gen_data_formats_round_trip_through_train() {
    let dir = tempfile::tempdir().unwrap();
    for (file, format) in [("c.jsonl", "jsonl"), ("c.txt", "hash")] {
        let o = tt(&["gen-data", "--out", file, "--format", format, "--num-sentences", "30"], dir.path());
        assert_eq!(code(&o), 0);
        let mut args = vec!["train", "--train-path", file, "--checkpoint-path", "m.ckpt"];
        args.extend_from_slice(TINY);
        let o = tt(&args, dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn train_then_eval_reproduces_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--checkpoint-path", "m.ckpt"];
    args.extend_from_slice(TINY);
    let trained = tt(&args, dir.path());
    assert_eq!(code(&trained), 0, "{}", String::from_utf8_lossy(&trained.stderr));
    let bytes = fs::read(dir.path().join("m.ckpt")).unwrap();
    assert!(bytes.starts_with(b"TTCKPT1"));

    let evaluated = tt(&["eval", "--checkpoint", "m.ckpt"], dir.path());
    assert_eq!(code(&evaluated), 0, "{}", String::from_utf8_lossy(&evaluated.stderr));
    assert_eq!(trained.stdout, evaluated.stdout);
    let report: serde_json::Value = serde_json::from_slice(&evaluated.stdout).unwrap();
    assert!(report["triplet_f1"].is_number());
}

#[test]
fn tt_seed_overrides_config_but_not_flag() {
    let dir = tempfile::tempdir().unwrap();
    // same path each time: the header records it
    let cfg = dir.path().join("seed.json");
    fs::write(&cfg, r#"{"seed": 5}"#).unwrap();
    let cfg = cfg.to_str().unwrap().to_string();
    let run = |env: Option<&str>, flag: Option<&str>| {
        let mut args = vec!["train", "--checkpoint-path", "m.ckpt", "--config", &cfg];
        args.extend_from_slice(TINY);
        if let Some(f) = flag {
            args.extend_from_slice(&["--seed", f]);
        }
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tt"));
        cmd.args(&args).current_dir(dir.path()).env_remove("TT_SEED");
        if let Some(e) = env {
            cmd.env("TT_SEED", e);
        }
        let o = cmd.output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        fs::read(dir.path().join("m.ckpt")).unwrap()
    };
    let by_env = run(Some("99"), None);
    let by_flag = run(None, Some("99"));
    let from_file = run(None, None);
    let both = run(Some("7"), Some("99"));
    assert_eq!(by_env, by_flag);
    assert_eq!(both, by_flag);
    assert_ne!(from_file, by_flag);
}

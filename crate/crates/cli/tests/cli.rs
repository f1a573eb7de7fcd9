use std::path::Path;
use std::process::{Command, Output};

fn muse(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_muse"))
        .args(args)
        .env_remove("MUMU_SEED")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = muse(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn dataset_output_is_byte_identical_under_a_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["dataset", "--kind", "muedit", "--synthetic", "--count", "5", "--seed", "9", "--out", s(dir)]);
    }
    for f in ["muedit.jsonl", "muedit.meta.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let first = std::fs::read_to_string(a.join("muedit.jsonl")).unwrap();
    let rec: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    let target = rec["target_audio"].as_str().unwrap();
    assert_eq!(std::fs::read(a.join(target)).unwrap(), std::fs::read(b.join(target)).unwrap());
    assert!(a.join("manifest.json").exists());
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(tmp.path());
    assert_eq!(muse(&["dataset", "--kind", "bogus", "--synthetic", "--out", out]).status.code(), Some(2));
    assert_eq!(muse(&["dataset", "--kind", "mucaps", "--out", out]).status.code(), Some(2));
    assert_eq!(muse(&["train", "--stage", "4", "--data", out, "--out", out]).status.code(), Some(2));
    let missing = tmp.path().join("nope");
    assert_eq!(muse(&["train", "--stage", "1", "--data", s(&missing), "--out", out]).status.code(), Some(1));
    assert_eq!(muse(&["train", "--stage", "2,1", "--data", out, "--out", out]).status.code(), Some(1));
}

#[test]
fn staged_training_writes_checkpoints_and_loss_columns() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    ok(&["dataset", "--kind", "all", "--synthetic", "--count", "4", "--seed", "2", "--out", s(&data)]);
    ok(&["train", "--stage", "1", "--data", s(&data), "--out", s(&run), "--max-steps", "3", "--seed", "2"]);
    let mut csv = csv::Reader::from_path(run.join("stage1_loss.csv")).unwrap();
    let headers = csv.headers().unwrap().clone();
    assert_eq!(headers.iter().collect::<Vec<_>>(), ["step", "total", "ce", "mse", "penalty"]);
    let rows: Vec<csv::StringRecord> = csv.records().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert!(r[2].parse::<f64>().unwrap() > 0.0);
        assert_eq!(r[3].parse::<f64>().unwrap(), 0.0);
    }

    // Stage 3 needs a stage-2 checkpoint.
    let s1 = run.join("stage1.safetensors");
    let bad = muse(&["train", "--stage", "3", "--data", s(&data), "--out", s(&run), "--resume", s(&s1)]);
    assert_eq!(bad.status.code(), Some(1));
    ok(&["train", "--stage", "2", "--data", s(&data), "--out", s(&run), "--resume", s(&s1), "--max-steps", "2"]);
    assert!(run.join("stage2.safetensors").exists());

    // A WAV appears exactly when the generated ids contain the audio span.
    let gen = tmp.path().join("gen");
    let log = ok(&[
        "generate", "--checkpoint", s(&run.join("stage2.safetensors")), "--prompt", "Describe this.",
        "--max-len", "4", "--seed", "1", "--out", s(&gen),
    ]);
    let tokens: Vec<usize> = serde_json::from_str(&std::fs::read_to_string(gen.join("tokens.json")).unwrap()).unwrap();
    let has_audio = tokens.iter().any(|&t| t >= 258);
    assert_eq!(gen.join("output.wav").exists(), has_audio);
    assert_eq!(log.contains("no audio tokens"), !has_audio);
}

#[test]
fn seed_flag_beats_env_beats_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("muse.cfg");
    std::fs::write(&cfg, "seed = 5\n").unwrap();
    let seed_of = |dir: &Path| -> u64 {
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
        m["seed"].as_u64().unwrap()
    };
    let run = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let out = tmp.path().join(name);
        let mut args = vec!["dataset", "--kind", "mucaps", "--synthetic", "--count", "1", "--config", s(&cfg)];
        if let Some(f) = flag {
            args.extend(["--seed", f]);
        }
        args.extend(["--out", s(&out)]);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_muse"));
        cmd.args(&args).env_remove("MUMU_SEED");
        if let Some(e) = env {
            cmd.env("MUMU_SEED", e);
        }
        assert!(cmd.output().unwrap().status.success());
        seed_of(&out)
    };
    assert_eq!(run("c", None, None), 5);
    assert_eq!(run("e", Some("7"), None), 7);
    assert_eq!(run("f", Some("7"), Some("9")), 9);
}

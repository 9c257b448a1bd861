use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rmroute(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rmroute"))
        .args(args)
        .env_remove("RMROUTE_OUT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = rmroute(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    rmroute(args).status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, domains: usize) {
    ok(&[
        "synth",
        "--domains",
        &domains.to_string(),
        "--per-domain",
        "16",
        "--test-per-domain",
        "4",
        "--seed",
        "5",
        "--out",
        s(dir),
    ]);
}

/// A small encoder so training in tests stays quick.
fn tiny_encoder(dir: &Path) -> String {
    let path = dir.join("encoder.toml");
    fs::write(
        &path,
        "vocab_size = 512\nmax_sequence_length = 32\nhidden_dim = 16\nnum_layers = 1\nnum_heads = 2\nffn_dim = 32\ndropout = 0.0\n",
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn ckpts(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n.ends_with(".ckpt"))
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_byte_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    synth(a.path(), 3);
    synth(b.path(), 3);
    for f in ["train.jsonl", "test.jsonl", "train.manifest.json"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn usage_and_validation_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["synth", "--out", s(dir.path())]), 2);
    assert_eq!(code(&["train", "--data", s(dir.path()), "--out", s(dir.path())]), 2);
    let missing = dir.path().join("nope");
    assert_eq!(code(&["train", "--method", "rodos", "--data", s(&missing), "--out", s(dir.path())]), 3);

    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "method = \"rodos\"\nlearning_rate = 1\n").unwrap();
    let out = rmroute(&["train", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));

    synth(dir.path(), 2);
    let out_dir = dir.path().join("runs");
    assert_eq!(code(&["eval", "--method", "rodos", "--data", s(dir.path()), "--out", s(&out_dir)]), 4);
}

#[test]
fn toy_parameter_report() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(&[
        "report-params",
        "--toy-backbone",
        "1000000",
        "--toy-adapter",
        "20000",
        "--domains",
        "5",
        "--out",
        s(dir.path()),
    ]);
    assert!(text.contains("6000000"), "{text}");
    assert!(text.contains("1120000"), "{text}");
    assert!(text.contains("18.7%"), "{text}");
}

#[test]
fn train_eval_bench_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("runs");
    synth(&data, 3);
    let enc = tiny_encoder(dir.path());
    let before: Vec<Vec<u8>> = ["train.jsonl", "test.jsonl"].iter().map(|f| fs::read(data.join(f)).unwrap()).collect();

    let common = ["--data", s(&data), "--out", s(&out), "--encoder", &enc];
    let with = |cmd: &str, extra: &[&str]| -> Vec<String> {
        let mut v = vec![cmd.to_string()];
        v.extend(common.iter().map(|x| x.to_string()));
        v.extend(extra.iter().map(|x| x.to_string()));
        v
    };
    let run = |args: Vec<String>| ok(&args.iter().map(String::as_str).collect::<Vec<_>>());

    run(with("train", &["--method", "rodos,arliss,baseline"]));
    assert_eq!(
        ckpts(&out.join("rodos/seed-0")),
        ["reward-alpha.ckpt", "reward-bravo.ckpt", "reward-charlie.ckpt", "router.ckpt"]
    );
    let arliss = ckpts(&out.join("arliss/seed-0"));
    assert_eq!(arliss.len(), 5, "{arliss:?}");
    assert!(arliss.contains(&"backbone.ckpt".to_string()));
    assert!(arliss.contains(&"adapter-router.ckpt".to_string()));
    assert!(out.join("arliss/seed-0/timing.json").exists());
    assert!(out.join("arliss/seed-0/train_log.txt").exists());

    let eval = run(with("eval", &["--method", "rodos,arliss,baseline"]));
    for m in ["rodos", "arliss", "baseline"] {
        assert!(eval.contains(m), "{eval}");
    }
    assert!(out.join("eval.json").exists());

    let bench = run(with("bench", &["--method", "rodos,arliss", "--per-domain", "5", "--reps", "1", "--warmup", "2"]));
    assert!(bench.contains("arliss") && bench.contains("rodos"), "{bench}");

    let params = run(with("report-params", &["--method", "rodos,arliss"]));
    assert!(params.contains("arliss"), "{params}");

    let after: Vec<Vec<u8>> = ["train.jsonl", "test.jsonl"].iter().map(|f| fs::read(data.join(f)).unwrap()).collect();
    assert_eq!(before, after, "inputs were modified");
}

#[test]
fn paper_preset_is_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("runs");
    synth(&data, 2);
    let enc = tiny_encoder(dir.path());
    ok(&[
        "train", "--method", "baseline", "--preset", "paper", "--data", s(&data), "--out", s(&out), "--encoder", &enc,
    ]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("baseline/seed-0/assembly.json")).unwrap()).unwrap();
    let train = &manifest["train"];
    assert_eq!(train["batch_size"], 32);
    assert_eq!(train["epochs"], 3);
    assert!((train["lr"].as_f64().unwrap() - 5e-6).abs() < 1e-12);
}

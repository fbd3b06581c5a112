use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: &str = r#"
text_train = 16
text_test = 8
audio_train = 10
audio_test = 5
width = 16
hidden = 32
codes = 16
code_dim = 8
mq_hidden = 16
diffusion_steps = 20
retrieval_width = 16
retrieval_dim = 8
retrieval_trials = 200
"#;

fn ude(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ude"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ude(dir, args);
    assert!(
        out.status.success(),
        "ude {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn fresh(name: &str) -> PathBuf {
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("cli").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    std::fs::write(dir.join("tiny.toml"), TINY).unwrap();
    dir
}

/// Dataset plus one trained run (one epoch per stage), shared by the tests.
fn fixture() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = fresh("shared");
        ok(&dir, &["synth", "--config", "tiny.toml", "--out", "data"]);
        ok(&dir, &["train", "all", "--config", "tiny.toml", "--data", "data", "--out", "run", "--epochs", "1"]);
        dir
    })
}

fn first_feature_file(dir: &Path) -> String {
    let mut files: Vec<_> = std::fs::read_dir(dir.join("data/cond"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "feat"))
        .collect();
    files.sort();
    files[0].strip_prefix(dir).unwrap().to_string_lossy().into_owned()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn tokens(v: &serde_json::Value, key: &str) -> Vec<u64> {
    v[key].as_array().unwrap().iter().map(|t| t.as_u64().unwrap()).collect()
}

#[test]
fn synth_is_seeded_and_counts_match_the_request() {
    let dir = fresh("synth");
    let cfg = "text_train = 256\ntext_test = 32\naudio_train = 256\naudio_test = 32\n";
    std::fs::write(dir.join("c.toml"), cfg).unwrap();
    let a = ok(&dir, &["synth", "--config", "c.toml", "--out", "a", "--seed", "5"]);
    let b = ok(&dir, &["synth", "--config", "c.toml", "--out", "b", "--seed", "5"]);
    let hash = |s: &str| s.lines().find(|l| l.starts_with("manifest")).unwrap().to_string();
    assert_eq!(hash(&a), hash(&b));
    let manifest = std::fs::read_to_string(dir.join("a/manifest.jsonl")).unwrap();
    let count = |split: &str| manifest.lines().filter(|l| l.contains(&format!("\"split\":\"{split}\""))).count();
    assert_eq!((count("train"), count("test")), (512, 64));
    assert!(std::fs::read_to_string(dir.join("a/synth_config.toml")).unwrap().contains("# seed = 5"));
}

#[test]
fn zero_counts_leave_families_out() {
    let dir = fresh("families");
    let cfg = "text_train = 2\ntext_test = 0\naudio_train = 0\naudio_test = 0\ntext_families = [\"jump\", \"kick\", \"wave\"]\n";
    std::fs::write(dir.join("c.toml"), cfg).unwrap();
    ok(&dir, &["synth", "--config", "c.toml", "--out", "d"]);
    let manifest = std::fs::read_to_string(dir.join("d/manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 2);
    assert!(manifest.contains("\"jump_train"));
    assert!(manifest.contains("\"kick_train"));
    assert!(!manifest.contains("wave_"));
    assert!(!manifest.contains("\"audio\""));
}

#[test]
fn utt_without_mq_is_a_missing_dependency() {
    let dir = fresh("order");
    ok(&dir, &["synth", "--config", "tiny.toml", "--out", "data"]);
    let out = ude(&dir, &["train", "utt", "--config", "tiny.toml", "--data", "data", "--out", "run"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("requires stage mq"));
    let out = ude(&dir, &["generate", "--config", "tiny.toml", "--run", "run", "--text", "a person jumps"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_all_writes_four_checkpoints_and_reproducible_logs() {
    let base = fixture();
    let run = base.join("run");
    for stage in ["mq", "utt", "dmd", "retrieval"] {
        let ckpt = std::fs::read_to_string(run.join(format!("{stage}.ckpt"))).unwrap();
        assert!(ckpt.starts_with(&format!("UDECKPT v1 module={stage}\n")));
        assert!(ckpt.contains("\"config\":{\"seed\":0"));
        let log = std::fs::read_to_string(run.join(format!("{stage}_loss.csv"))).unwrap();
        assert!(log.starts_with("# seed = 0\n"));
        assert!(run.join(format!("{stage}_loss.svg")).is_file());
    }
    let utt = std::fs::read_to_string(run.join("utt.ckpt")).unwrap();
    let mq_hash = sha256sum(&run.join("mq.ckpt"));
    assert!(utt.contains(&format!("\"deps\":{{\"mq\":\"{mq_hash}\"}}")));

    let again = fresh("again");
    ok(&again, &["synth", "--config", "tiny.toml", "--out", "data"]);
    ok(&again, &["train", "all", "--config", "tiny.toml", "--data", "data", "--out", "run", "--epochs", "1"]);
    for stage in ["mq", "utt", "dmd", "retrieval"] {
        let name = format!("{stage}_loss.csv");
        let a = std::fs::read_to_string(run.join(&name)).unwrap();
        let b = std::fs::read_to_string(again.join("run").join(&name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

/// SHA-256 from coreutils, independent of the crate's hashing.
fn sha256sum(path: &Path) -> String {
    let out = Command::new("sha256sum").arg(path).output().expect("sha256sum runs");
    String::from_utf8_lossy(&out.stdout).split_whitespace().next().unwrap().to_string()
}

#[test]
fn stale_dependency_is_detected() {
    let base = fixture();
    let dir = fresh("stale");
    let run = dir.join("run");
    std::fs::create_dir_all(&run).unwrap();
    for f in ["mq.ckpt", "utt.ckpt", "dmd.ckpt", "retrieval.ckpt"] {
        std::fs::copy(base.join("run").join(f), run.join(f)).unwrap();
    }
    ok(&dir, &["generate", "--config", "tiny.toml", "--run", "run", "--text", "a person jumps", "--decoder", "vq"]);
    // retraining mq invalidates the token and diffusion checkpoints
    ok(&dir, &["synth", "--config", "tiny.toml", "--out", "data"]);
    ok(&dir, &["train", "mq", "--config", "tiny.toml", "--data", "data", "--out", "run", "--epochs", "1", "--seed", "9"]);
    let out = ude(&dir, &["generate", "--config", "tiny.toml", "--run", "run", "--text", "a person jumps", "--decoder", "vq"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("retrain stage utt"));
}

#[test]
fn generation_is_reproducible_and_sized() {
    let dir = fixture();
    let args = |out: &'static str| {
        vec!["generate", "--config", "tiny.toml", "--run", "run", "--text", "a person jumps", "--decoder", "vq", "--frames", "64", "--out", out, "--plot"]
    };
    ok(dir, &args("g1"));
    ok(dir, &args("g2"));
    let a = std::fs::read(dir.join("g1/generated.motion")).unwrap();
    assert_eq!(a, std::fs::read(dir.join("g2/generated.motion")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count() - 1, 64);
    let report = json(&dir.join("g1/generated.json"));
    assert_eq!(tokens(&report, "tokens").len(), 16);
    assert_eq!(report["request"]["frames"], 64);
    assert_eq!(report["config"]["seed"], 0);
    assert!(std::fs::read_to_string(dir.join("g1/generated.svg")).unwrap().starts_with("<svg"));
}

#[test]
fn z_on_with_two_seeds_differs() {
    let dir = fixture();
    for (seed, out) in [("1", "z1"), ("2", "z2")] {
        ok(dir, &["generate", "--config", "tiny.toml", "--run", "run", "--text", "someone kicks", "--z", "--seed", seed, "--out", out]);
    }
    let a = (json(&dir.join("z1/generated.json")), std::fs::read(dir.join("z1/generated.motion")).unwrap());
    let b = (json(&dir.join("z2/generated.json")), std::fs::read(dir.join("z2/generated.motion")).unwrap());
    assert!(tokens(&a.0, "tokens") != tokens(&b.0, "tokens") || a.1 != b.1);
}

#[test]
fn audio_generation_and_bad_requests() {
    let dir = fixture();
    let feat = first_feature_file(dir);
    ok(dir, &["generate", "--config", "tiny.toml", "--run", "run", "--audio", &feat, "--out", "ga"]);
    assert_eq!(json(&dir.join("ga/generated.json"))["request"]["modality"], "audio");
    let out = ude(dir, &["generate", "--config", "tiny.toml", "--run", "run", "--text", "x", "--frames", "62"]);
    assert_eq!(out.status.code(), Some(2));
    let out = ude(dir, &["generate", "--config", "tiny.toml", "--run", "run", "--text", "qqq zzz", "--decoder", "vq", "--out", "gu"]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let out = ude(dir, &["generate", "--config", "tiny.toml", "--run", "run", "--audio", "data/manifest.jsonl"]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn transition_reuses_the_primitive() {
    let dir = fixture();
    let feat = first_feature_file(dir);
    let base = ["transition", "--config", "tiny.toml", "--run", "run", "--text", "someone walks", "--audio", &feat, "--decoder", "vq"];
    let with = |extra: &[&'static str]| -> Vec<String> {
        base.iter().chain(extra).map(|s| s.to_string()).collect()
    };
    let run = |args: Vec<String>| ude(dir, &args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(run(with(&["--out", "t8"])).status.success());
    let r = json(&dir.join("t8/transition.json"));
    let (text, audio) = (tokens(&r, "text_tokens"), tokens(&r, "audio_tokens"));
    assert_eq!(&audio[..8], &text[text.len() - 8..]);
    assert!(r["boundary_jump"].as_f64().unwrap() >= 0.0);
    assert_eq!(r["boundary_frame"], 64);
    assert!(r["config"].is_object());

    assert!(run(with(&["--out", "t0", "--primitive-len", "0"])).status.success());
    let r = json(&dir.join("t0/transition.json"));
    assert_eq!(tokens(&r, "audio_tokens").len(), 16);
    let out = run(with(&["--primitive-len", "17"]));
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn eval_ground_truth_and_sample_counts() {
    let dir = fixture();
    ok(dir, &["eval", "--config", "tiny.toml", "--run", "run", "--data", "data", "--ground-truth", "--out", "egt"]);
    let m = json(&dir.join("egt/metrics.json"));
    assert!(m["metrics"]["FID_k"].as_f64().unwrap().abs() < 1e-6);
    assert!(m["metrics"]["FID_m"].as_f64().unwrap().abs() < 1e-6);
    assert_eq!(m["metrics"]["APE"], 0.0);

    let run = |threads: &str, out: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_ude"))
            .current_dir(dir)
            .env("UDE_THREADS", threads)
            .args(["eval", "--config", "tiny.toml", "--run", "run", "--data", "data", "--samples-per-input", "30", "--out", out])
            .output()
            .unwrap();
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    };
    run("1", "e1");
    run("3", "e3");
    let a = std::fs::read(dir.join("e1/metrics.json")).unwrap();
    assert_eq!(a, std::fs::read(dir.join("e3/metrics.json")).unwrap());
    let dump = std::fs::read_to_string(dir.join("e1/features.csv")).unwrap();
    let gen_rows = dump.lines().filter(|l| l.starts_with("gen,")).count();
    let gt_rows = dump.lines().filter(|l| l.starts_with("gt,")).count();
    assert_eq!(gen_rows, 30 * gt_rows);

    // documented schema
    let m = json(&dir.join("e1/metrics.json"));
    for key in ["FID_k", "FID_m", "Div_k", "Div_m", "top1", "top5", "beat_align", "APE", "AVE", "APE_root", "AVE_root"] {
        assert!(m["metrics"][key].is_f64(), "missing {key}");
    }
    assert_eq!(m["counts"]["samples_per_input"], 30);
    assert_eq!(m["counts"]["generated_rows"], 30 * 13);
    assert_eq!(m["seed"], 0);
    assert_eq!(m["config"]["samples_per_input"], 30);

    let bad = Command::new(env!("CARGO_BIN_EXE_ude"))
        .current_dir(dir)
        .env("UDE_THREADS", "zero")
        .args(["eval", "--config", "tiny.toml", "--run", "run", "--data", "data", "--out", "ebad"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn empty_test_split_is_a_data_error() {
    let base = fixture();
    let dir = fresh("empty");
    std::fs::write(dir.join("c.toml"), format!("{TINY}\ntext_test = 0\naudio_test = 0\n").replace("text_test = 8\n", "").replace("audio_test = 5\n", "")).unwrap();
    ok(&dir, &["synth", "--config", "c.toml", "--out", "data"]);
    let run = base.join("run");
    let out = ude(&dir, &["eval", "--config", "c.toml", "--run", run.to_str().unwrap(), "--data", "data", "--decoder", "vq"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("empty test split"));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = fresh("config");
    std::fs::write(dir.join("bad.toml"), "bogus = 1\n").unwrap();
    let out = ude(&dir, &["synth", "--config", "bad.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));
    assert_eq!(ude(&dir, &["train", "everything"]).status.code(), Some(2));
    assert_eq!(ude(&dir, &["synth", "--config", "missing.toml"]).status.code(), Some(2));
}

#[test]
fn numerical_failure_exits_with_five() {
    let dir = fresh("nan");
    std::fs::write(dir.join("nan.toml"), format!("{TINY}mq_lr = 1e200\nmax_grad_norm = 0.0\n")).unwrap();
    ok(&dir, &["synth", "--config", "nan.toml", "--out", "data"]);
    let out = ude(&dir, &["train", "mq", "--config", "nan.toml", "--data", "data", "--out", "run", "--epochs", "2"]);
    assert_eq!(out.status.code(), Some(5), "{}", String::from_utf8_lossy(&out.stderr));
}

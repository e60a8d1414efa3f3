use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_prefalign");

const CONFIG: &str = r#"seed = 3
[task]
teacher_seed = 5
pool_size = 4
seq_len = 6
eval_pool_size = 2
[model]
alphabet_size = 5
feature_dim = 3
embed_dim = 3
hidden_dim = 8
[pretrain]
epochs = 8
[run]
iterations = 2
steps_per_iteration = 3
backbones_per_iteration = 2
rollouts_per_backbone = 4
batch_size = 4
[run.optim]
lr = 1e-3
"#;

fn prefalign(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("config.toml");
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pretrain(dir: &Path, cfg: &Path, name: &str) -> PathBuf {
    let out = dir.join(name);
    let o = prefalign(&["pretrain", "--config", s(cfg), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn pretrain_writes_outputs_and_reduces_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let out = pretrain(dir.path(), &cfg, "p");
    for f in ["base.json", "pretrain_log.jsonl", "resolved_config.toml", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let losses: Vec<f64> = fs::read_to_string(out.join("pretrain_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap()["loss"].as_f64().unwrap())
        .collect();
    assert_eq!(losses.len(), 8);
    assert!(losses.last().unwrap() < losses.first().unwrap(), "{losses:?}");

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "pretrain");
    assert_eq!(manifest["seeds"]["seed"], 3);
    assert!(manifest["finished_at"].as_f64().is_some());
}

#[test]
fn align_is_deterministic_and_eval_has_schema() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let base = pretrain(dir.path(), &cfg, "p").join("base.json");
    let mut metrics = Vec::new();
    for name in ["a1", "a2"] {
        let out = dir.path().join(name);
        let o = prefalign(&["align", "--config", s(&cfg), "--base", s(&base), "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        for f in ["final.json", "metrics.jsonl", "eval.tsv", "manifest.json", "ckpt_1", "ckpt_2"] {
            assert!(out.join(f).exists(), "{f} missing");
        }
        metrics.push(fs::read(out.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
    assert_eq!(metrics[0].iter().filter(|&&b| b == b'\n').count(), 2);

    let ev = dir.path().join("e");
    let final_ckpt = dir.path().join("a1").join("final.json");
    let o = prefalign(&["eval", "--config", s(&cfg), "--checkpoint", s(&final_ckpt), "--out", s(&ev)]);
    assert!(o.status.success());
    let table = fs::read_to_string(ev.join("eval.tsv")).unwrap();
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("metric\tmean\tstderr\tn"));
    let metrics: Vec<&str> = lines.map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(metrics, ["designability", "solubility", "aar"]);
    for l in table.lines().skip(1) {
        let cols: Vec<&str> = l.split('\t').collect();
        assert_eq!(cols.len(), 4);
        cols[1].parse::<f64>().unwrap();
        cols[2].parse::<f64>().unwrap();
        assert_eq!(cols[3], "8");
    }
}

#[test]
fn overrides_reach_the_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let base = pretrain(dir.path(), &cfg, "p").join("base.json");
    let out = dir.path().join("a");
    let o = prefalign(&[
        "align", "--config", s(&cfg), "--base", s(&base), "--out", s(&out), "--loss", "dpo", "--beta", "0.25",
        "--lambda", "2", "--scaling", "appendix", "--seed", "11",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let resolved = fs::read_to_string(out.join("resolved_config.toml")).unwrap();
    let v: toml::Table = resolved.parse().unwrap();
    assert_eq!(v["seed"].as_integer(), Some(11));
    assert_eq!(v["run"]["loss"].as_str(), Some("dpo"));
    assert_eq!(v["run"]["align"]["beta"].as_float(), Some(0.25));
    assert_eq!(v["run"]["align"]["lambda"].as_float(), Some(2.0));
    assert_eq!(v["run"]["align"]["scaling"].as_str(), Some("appendix"));
}

#[test]
fn missing_required_field_exits_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[task]\nteacher_seed = 1\npool_size = 4\n");
    let o = prefalign(&["pretrain", "--config", s(&cfg), "--out", s(&dir.path().join("p"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("seq_len"), "{err}");
}

#[test]
fn invalid_values_exit_one_listing_every_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = format!("{CONFIG}[run.align]\nbeta = -1.0\n").replace("batch_size = 4", "batch_size = 0");
    let cfg = write_config(dir.path(), &text);
    let o = prefalign(&["pretrain", "--config", s(&cfg), "--out", s(&dir.path().join("p"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("beta") && err.contains("batch_size"), "{err}");
}

#[test]
fn arch_mismatch_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let base = pretrain(dir.path(), &cfg, "p").join("base.json");
    let other = write_config(dir.path(), &CONFIG.replace("hidden_dim = 8", "hidden_dim = 9"));
    let o = prefalign(&["align", "--config", s(&other), "--base", s(&base), "--out", s(&dir.path().join("a"))]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("architecture"));
}

#[test]
fn missing_checkpoint_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), CONFIG);
    let o = prefalign(&[
        "eval", "--config", s(&cfg), "--checkpoint", s(&dir.path().join("nope.json")), "--out",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn collapsed_run_aborts_with_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    // Absolute thresholds no sampled pair can clear: every iteration has zero pairs.
    let text = format!(
        "{CONFIG}[[oracles]]\nname = \"designability\"\nkind = \"designability\"\nweight = 1.0\nthreshold = {{ kind = \"absolute\", value = 1e9 }}\n"
    )
    .replace("iterations = 2", "iterations = 5");
    let cfg = write_config(dir.path(), &text);
    let base = pretrain(dir.path(), &cfg, "p").join("base.json");
    let o = prefalign(&["align", "--config", s(&cfg), "--base", s(&base), "--out", s(&dir.path().join("a"))]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn check_passes_and_detects_injected_fault() {
    let o = prefalign(&["check", "--instances", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stdout));
    let table = String::from_utf8_lossy(&o.stdout);
    assert_eq!(table.lines().filter(|l| l.contains("PASS")).count(), 9);

    let o = prefalign(&["check", "--instances", "2", "--inject-fault", "gradient-scale"]);
    assert_eq!(o.status.code(), Some(3));
    let table = String::from_utf8_lossy(&o.stdout);
    let failed: Vec<&str> = table
        .lines()
        .filter(|l| l.contains("FAIL"))
        .map(|l| l.split_whitespace().next().unwrap())
        .collect();
    assert_eq!(failed, ["gradient.mo_main_text", "gradient.mo_appendix"]);
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        let target = to.join(e.file_name());
        if e.file_type().unwrap().is_dir() {
            copy_dir(&e.path(), &target);
        } else {
            fs::copy(e.path(), target).unwrap();
        }
    }
}

#[test]
fn resume_reproduces_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &CONFIG.replace("iterations = 2", "iterations = 3"));
    let base = pretrain(dir.path(), &cfg, "p").join("base.json");
    let full = dir.path().join("full");
    let o = prefalign(&["align", "--config", s(&cfg), "--base", s(&base), "--out", s(&full)]);
    assert!(o.status.success());
    let resumed = dir.path().join("resumed");
    copy_dir(&full, &resumed);
    let o = prefalign(&["align", "--config", s(&cfg), "--base", s(&base), "--out", s(&resumed), "--resume", "1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["metrics.jsonl", "final.json", "eval.tsv"] {
        assert_eq!(fs::read(full.join(f)).unwrap(), fs::read(resumed.join(f)).unwrap(), "{f} differs");
    }
}

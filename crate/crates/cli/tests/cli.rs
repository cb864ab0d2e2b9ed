use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixer_core::checkpoint::Checkpoint;
use mixer_core::config::RunConfig;
use mixer_core::data_org::OrganizationReport;
use mixer_core::model::MixerModel;
use mixer_core::numerics::Parameterized;

const TINY: &str = r#"
seed = 3

[model]
d = 16
n = 8
n_raw = 16
backbone_hidden = 8
vocab = 64
max_text_len = 8

[data]
num_products = 8
relevance_groups = 2
min_samples_per_product = 6
mean_samples_per_product = 8
vocab_size = 64
n_raw = 16
max_tokens = 6

[train]
learning_rate = 0.02

[[train.plan]]
name = "A"
dataset = "medium"
iterations = 6

[[train.plan]]
name = "B"
dataset = "large"
iterations = 4
frozen = ["backbone", "text", "fusion", "query_transform", "doc_transform"]

[[train.plan]]
name = "C"
dataset = "large"
iterations = 6

[study]
seeds = [0]
clip_caps = [2]

[grad_check]
seeds = [0]
"#;

fn mixer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixer")).args(args).output().expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "status {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn gen_data_is_byte_identical_across_runs() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "tiny.toml", TINY);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    assert_ok(&mixer(&["gen-data", "--config", s(&cfg), "--out", s(&a)]));
    assert_ok(&mixer(&["gen-data", "--config", s(&cfg), "--out", s(&b)]));
    let files = dir_bytes(&a);
    let names: BTreeSet<&str> = files.iter().map(|(n, _)| n.as_str()).collect();
    for f in [
        "samples.jsonl",
        "test_samples.jsonl",
        "clicks.jsonl",
        "ground_truth.json",
        "judgments.jsonl",
        "organization.json",
        "resolved_config.toml",
    ] {
        assert!(names.contains(f), "missing {f}");
    }
    assert_eq!(files, dir_bytes(&b));
}

#[test]
fn one_product_gives_one_category() {
    let t = tempfile::tempdir().unwrap();
    let text = TINY.replace("num_products = 8", "num_products = 1").replace("relevance_groups = 2", "relevance_groups = 1");
    let cfg = write_config(t.path(), "one.toml", &text);
    let out = t.path().join("data");
    assert_ok(&mixer(&["gen-data", "--config", s(&cfg), "--out", s(&out)]));
    let org: OrganizationReport = serde_json::from_slice(&fs::read(out.join("organization.json")).unwrap()).unwrap();
    assert_eq!(org.final_ids, 1);
}

#[test]
fn default_config_id_counts_are_pinned() {
    let t = tempfile::tempdir().unwrap();
    let out = t.path().join("data");
    assert_ok(&mixer(&["gen-data", "--out", s(&out)]));
    let org: OrganizationReport = serde_json::from_slice(&fs::read(out.join("organization.json")).unwrap()).unwrap();
    assert_eq!(
        (org.samples, org.initial_ids, org.after_clicks, org.after_clustering, org.final_ids),
        (6000, 6000, Some(667), Some(200), 200)
    );
    let echoed = RunConfig::load(&out.join("resolved_config.toml")).unwrap();
    assert_eq!(echoed, RunConfig::default());
}

#[test]
fn train_eval_and_resume() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "tiny.toml", TINY);
    let data = t.path().join("data");
    let run = t.path().join("run");
    assert_ok(&mixer(&["gen-data", "--config", s(&cfg), "--out", s(&data)]));
    let out = mixer(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("phase A: 6 iterations"), "{stdout}");
    for f in ["phase_a.ckpt", "phase_b.ckpt", "phase_c.ckpt"] {
        assert!(run.join("checkpoints").join(f).is_file(), "missing {f}");
    }
    assert!(run.join("train_log.jsonl").is_file());
    assert!(run.join("resolved_config.toml").is_file());

    let a = Checkpoint::load(&run.join("checkpoints/phase_a.ckpt")).unwrap();
    let b = Checkpoint::load(&run.join("checkpoints/phase_b.ckpt")).unwrap();
    assert_eq!(a.model, b.model, "phase B must not touch the towers");
    assert_ne!(a.proxies, b.proxies);

    let resumed = t.path().join("resumed");
    assert_ok(&mixer(&[
        "train",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&resumed),
        "--resume",
        s(&run.join("checkpoints/phase_a.ckpt")),
    ]));
    assert_eq!(fs::read(run.join("final.ckpt")).unwrap(), fs::read(resumed.join("final.ckpt")).unwrap());

    let ev = t.path().join("eval");
    assert_ok(&mixer(&[
        "eval",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&run.join("final.ckpt")),
        "--data",
        s(&data),
        "--out",
        s(&ev),
    ]));
    let metrics: serde_json::Map<String, serde_json::Value> =
        serde_json::from_slice(&fs::read(ev.join("metrics.json")).unwrap()).unwrap();
    let keys: BTreeSet<&str> = metrics.keys().map(String::as_str).collect();
    assert_eq!(keys, BTreeSet::from(["identical_at_1", "identical_at_5", "relevance_at_1", "map", "mrr"]));
    for v in metrics.values() {
        let x = v.as_f64().unwrap();
        assert!((0.0..=1.0).contains(&x));
    }

    // a missing judgment is a validation failure, a missing file an I/O one
    let judgments = fs::read_to_string(data.join("judgments.jsonl")).unwrap();
    let partial = t.path().join("partial.jsonl");
    fs::write(&partial, judgments.lines().skip(1).collect::<Vec<_>>().join("\n")).unwrap();
    let final_ck = run.join("final.ckpt");
    let missing = t.path().join("nope.jsonl");
    let base = ["eval", "--config", s(&cfg), "--checkpoint", s(&final_ck), "--data", s(&data), "--out", s(&ev)];
    let out = mixer(&[&base[..], &["--judgments", s(&partial)]].concat());
    assert_eq!(out.status.code(), Some(1));
    let out = mixer(&[&base[..], &["--judgments", s(&missing)]].concat());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_iteration_plan_checkpoints_the_initialization() {
    let t = tempfile::tempdir().unwrap();
    let text = TINY.replace("iterations = 6", "iterations = 0").replace("iterations = 4", "iterations = 0");
    let cfg = write_config(t.path(), "zero.toml", &text);
    let data = t.path().join("data");
    let run = t.path().join("run");
    assert_ok(&mixer(&["gen-data", "--config", s(&cfg), "--out", s(&data)]));
    assert_ok(&mixer(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&run)]));
    let ck = Checkpoint::load(&run.join("final.ckpt")).unwrap();
    let parsed = RunConfig::from_toml(&text).unwrap();
    let init = MixerModel::new(parsed.model.clone(), parsed.seed).unwrap();
    assert_eq!(ck.header.iteration, 0);
    for (a, b) in ck.model.params().iter().zip(init.params()) {
        assert_eq!(a.value, b.value, "{}", a.name);
    }
}

#[test]
fn dimension_mismatch_is_a_validation_failure() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "tiny.toml", TINY);
    let data = t.path().join("data");
    assert_ok(&mixer(&["gen-data", "--config", s(&cfg), "--out", s(&data)]));
    let wide = TINY.replace("n_raw = 16", "n_raw = 32");
    let wide_cfg = write_config(t.path(), "wide.toml", &wide);
    let out = mixer(&["train", "--config", s(&wide_cfg), "--data", s(&data), "--out", s(&t.path().join("w"))]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn config_errors_and_exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let bad = write_config(t.path(), "bad.toml", "[model]\nwidth = 3\n");
    let out = mixer(&["gen-data", "--config", s(&bad), "--out", s(&t.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    let out = mixer(&["gen-data", "--config", s(&t.path().join("missing.toml")), "--out", s(&t.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    let out = mixer(&["train", "--data", s(&t.path().join("no_data")), "--out", s(&t.path().join("y"))]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(mixer(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(mixer(&["--help"]).status.code(), Some(0));
}

#[test]
fn grad_check_reports_every_group() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "tiny.toml", TINY);
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let out = mixer(&["grad-check", "--config", s(&cfg), "--out", s(&a)]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for g in ["backbone", "text", "fusion", "query_transform", "doc_transform", "proxies"] {
        assert!(stdout.lines().any(|l| l.starts_with(g) && l.ends_with("pass")), "{g}: {stdout}");
    }
    assert_ok(&mixer(&["grad-check", "--config", s(&cfg), "--out", s(&b)]));
    assert_eq!(fs::read(a.join("grad_check.json")).unwrap(), fs::read(b.join("grad_check.json")).unwrap());

    let out = mixer(&["grad-check", "--config", s(&cfg), "--corrupt-group", "doc_transform"]);
    assert_eq!(out.status.code(), Some(1));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.lines().any(|l| l.starts_with("doc_transform") && l.ends_with("FAIL")), "{stdout}");
}

#[test]
fn ablate_writes_variant_and_cap_results() {
    let t = tempfile::tempdir().unwrap();
    let cfg = write_config(t.path(), "tiny.toml", TINY);
    let out_dir = t.path().join("ablate");
    let out = mixer(&["ablate", "--config", s(&cfg), "--out", s(&out_dir)]);
    assert_ok(&out);
    let stdout = String::from_utf8_lossy(&out.stdout);
    for label in ["mixer ", "mixer-i", "mixer-e", "cap 2"] {
        assert!(stdout.contains(label), "{label}: {stdout}");
    }
    let v: serde_json::Value = serde_json::from_slice(&fs::read(out_dir.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 3);
    assert!(out_dir.join("samples_per_id.json").is_file());
}

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lynx_core::data_pipeline::{load_manifest, write_manifest, PairRecord, PairType, Portrait};
use lynx_core::eval_harness::mock::{MockJudgeServer, MockReply};
use lynx_core::eval_harness::{build_benchmark, URL_ENV};
use lynx_core::media::{save_frames, Frame};
use serde_json::Value;

const SMALL: &str = r#"
seed = 7

[model]
hidden_dim = 32
num_blocks = 2
num_heads = 4
text_dim = 16
time_freq_dim = 32

[id_adapter]
face_dim = 64
n_id = 4
n_reg = 4
depth = 1
heads = 4
face_tokens = 2

[train]
image_iters = 3
video_iters = 3
batch_size = 2
pack_budget = 256

[sampler]
num_steps = 2

[sample]
num_frames = 2
width = 32
height = 32
"#;

fn lynx(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lynx"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove(URL_ENV)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status.code(), stdout(o), stderr(o));
}

fn json_out(o: &Output) -> Value {
    ok(o);
    serde_json::from_str(&stdout(o)).unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// Small config plus a two-subject synthetic dataset.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    ok(&lynx(
        dir.path(),
        &["-c", "small.toml", "data", "synth", "--out-dir", "data", "--subjects", "2", "--frames", "2", "--size", "32"],
    ));
    dir
}

#[test]
fn inspect_pack_waste_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let r = json_out(&lynx(dir.path(), &["inspect-pack", "--lengths", "64,36", "--budget", "128"]));
    assert_eq!(r["waste_fraction"].as_f64().unwrap(), 0.21875);
    assert_eq!(r["packs"][0]["boundaries"], serde_json::json!([0, 64, 100]));
    let r = json_out(&lynx(dir.path(), &["inspect-pack", "--lengths", "128", "--budget", "128"]));
    assert_eq!(r["waste_fraction"].as_f64().unwrap(), 0.0);

    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let r = json_out(&lynx(dir.path(), &["inspect-pack", "--manifest", "empty.jsonl", "--budget", "64"]));
    assert_eq!(r["packs"].as_array().unwrap().len(), 0);
    assert_eq!(r["waste_fraction"].as_f64().unwrap(), 0.0);

    let o = lynx(dir.path(), &["inspect-pack", "--lengths", "200", "--budget", "128"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
}

#[test]
fn inspect_pack_reads_manifest_targets() {
    let dir = workspace();
    let r = json_out(&lynx(
        dir.path(),
        &["-c", "small.toml", "inspect-pack", "--manifest", "data/manifest.jsonl", "--budget", "16", "--run-dir", "ip"],
    ));
    // 2 frames of 32×32 pixels: 4×4 latents, 2×2 patches per frame.
    assert_eq!(r["num_samples"], 4);
    assert_eq!(r["packs"][0]["lengths"], serde_json::json!([8, 8]));
    assert!(dir.path().join("ip/config.toml").exists());
    assert!(dir.path().join("ip/pack_report.json").exists());
}

#[test]
fn stats_on_empty_and_synthetic_manifests() {
    let dir = workspace();
    std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
    let r = json_out(&lynx(dir.path(), &["data", "stats", "--manifest", "empty.jsonl", "--json"]));
    assert_eq!(r["total"], 0);
    assert!(r["per_type"].as_object().unwrap().values().all(|v| v == 0));

    let o = lynx(dir.path(), &["data", "stats", "--manifest", "data/manifest.jsonl"]);
    ok(&o);
    assert!(stdout(&o).contains("single_scene"), "{}", stdout(&o));
    assert!(stdout(&o).contains("total"));
}

#[test]
fn filter_keeps_matching_pairs_and_drops_faceless_target() {
    let dir = workspace();
    let mut records = load_manifest(&dir.path().join("data/manifest.jsonl")).unwrap();
    records.truncate(2);
    let blank = dir.path().join("blank");
    save_frames(&blank, &[Frame::filled(32, 32, [0.5, 0.5, 0.5])]).unwrap();
    records.push(PairRecord::new(
        PairType::SingleScene,
        records[0].condition_image.clone(),
        blank,
        "nobody",
    ));
    write_manifest(&dir.path().join("three.jsonl"), &records).unwrap();

    let o = lynx(dir.path(), &["data", "filter", "--manifest", "three.jsonl", "--out-dir", "filtered"]);
    ok(&o);
    assert!(stdout(&o).contains("kept 2 dropped 1"), "{}", stdout(&o));
    let kept = load_manifest(&dir.path().join("filtered/kept.jsonl")).unwrap();
    assert_eq!(kept.len(), 2);
    assert!(kept.iter().all(|r| r.resemblance.is_some()));
    let dropped = std::fs::read_to_string(dir.path().join("filtered/dropped.jsonl")).unwrap();
    assert_eq!(dropped.lines().count(), 1);
    assert!(dir.path().join("filtered/config.toml").exists());
}

#[test]
fn unit_gamma_augment_copies_bytes_and_flags_no_ops() {
    let dir = workspace();
    let o = lynx(
        dir.path(),
        &["data", "augment", "--manifest", "data/manifest.jsonl", "--out-dir", "aug", "--kind", "relight", "--gamma", "1"],
    );
    ok(&o);
    assert!(stdout(&o).contains("2 no-ops"), "{}", stdout(&o));
    let records = load_manifest(&dir.path().join("aug/manifest.jsonl")).unwrap();
    let added: Vec<_> = records.iter().filter(|r| r.pair_type == PairType::AugmentedSingleScene).collect();
    assert_eq!(added.len(), 2);
    for r in added {
        assert_eq!(r.extra["no_op"], Value::Bool(true));
        let src = PathBuf::from(r.extra["source"].as_str().unwrap());
        assert_eq!(std::fs::read(&r.condition_image).unwrap(), std::fs::read(src).unwrap());
    }
    // Inputs are untouched.
    assert_eq!(load_manifest(&dir.path().join("data/manifest.jsonl")).unwrap().len(), 4);
}

#[test]
fn config_errors_exit_two_and_name_the_field() {
    let dir = workspace();
    let o = lynx(dir.path(), &["-c", "small.toml", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("data.manifest"), "{}", stderr(&o));

    let o = lynx(dir.path(), &["-c", "small.toml", "--set", "data.manifest=missing.jsonl", "train"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing.jsonl"), "{}", stderr(&o));

    let o = lynx(dir.path(), &["--set", "train.lr=-1", "config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("train.lr"), "{}", stderr(&o));

    let o = lynx(dir.path(), &["--set", "model.hiden_dim=8", "config"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hiden_dim"), "{}", stderr(&o));

    let o = lynx(dir.path(), &["-c", "nope.toml", "config"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn overrides_win_over_the_file() {
    let dir = workspace();
    let o = lynx(dir.path(), &["-c", "small.toml", "--set", "train.lr=0.25", "--set", "seed=9", "config"]);
    ok(&o);
    let echoed: toml::Table = stdout(&o).parse().unwrap();
    assert_eq!(echoed["seed"].as_integer(), Some(9));
    assert_eq!(echoed["train"]["lr"].as_float(), Some(0.25));
    assert_eq!(echoed["model"]["hidden_dim"].as_integer(), Some(32));
}

/// Metrics lines without wall-clock timings.
fn metrics(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_ms");
            v
        })
        .collect()
}

fn train(dir: &Path, run_dir: &str, extra: &[&str]) -> Output {
    let mut args = vec!["-c", "small.toml", "--set", "data.manifest=data/manifest.jsonl", "train", "--run-dir", run_dir];
    args.extend_from_slice(extra);
    lynx(dir, &args)
}

#[test]
fn train_resume_and_sample() {
    let dir = workspace();
    let d = dir.path();
    ok(&train(d, "full", &[]));
    for f in ["config.toml", "metrics.jsonl", "train_summary.json", "checkpoints/image.ckpt", "checkpoints/video.ckpt"] {
        assert!(d.join("full").join(f).exists(), "missing {f}");
    }
    let full = metrics(&d.join("full/metrics.jsonl"));
    assert_eq!(full.len(), 6);
    assert_eq!(read_json(&d.join("full/train_summary.json"))["steps"], 6);

    // Interrupted after the image stage, then resumed from its checkpoint.
    ok(&train(d, "part", &["--stop-after", "3"]));
    assert!(d.join("part/checkpoints/step_3.ckpt").exists());
    assert!(!d.join("part/checkpoints/video.ckpt").exists());
    ok(&train(d, "part", &["--resume", "part/checkpoints/image.ckpt"]));
    assert_eq!(metrics(&d.join("part/metrics.jsonl")), full);
    assert_eq!(
        std::fs::read(d.join("part/checkpoints/video.ckpt")).unwrap(),
        std::fs::read(d.join("full/checkpoints/video.ckpt")).unwrap()
    );

    let ckpt = "full/checkpoints/video.ckpt";
    let reference = "data/subject_000/condition.png";
    let sample = |out: &str, sets: &[&str]| {
        let mut args = vec!["-c", "small.toml", "--set", "sampler.num_steps=1"];
        for s in sets {
            args.extend(["--set", s]);
        }
        args.extend(["sample", "--checkpoint", ckpt, "--reference", reference, "--prompt", "a person smiling", "--out", out, "--seed", "5"]);
        lynx(d, &args)
    };
    ok(&sample("s1", &[]));
    ok(&sample("s2", &[]));
    let (m1, m2) = (read_json(&d.join("s1/metadata.json")), read_json(&d.join("s2/metadata.json")));
    assert_eq!(m1["output_sha256"], m2["output_sha256"]);
    assert_eq!(m1["seed"], 5);
    assert_eq!(m1["steps"], 1);
    assert_eq!(m1["config_hash"].as_str().unwrap().len(), 64);
    assert_eq!(m1["frames"].as_array().unwrap().len(), 2);
    assert!(d.join("s1/frame_0001.png").exists());
    assert!(d.join("s1/config.toml").exists());

    ok(&sample("single", &["sample.num_frames=1"]));
    assert_eq!(read_json(&d.join("single/metadata.json"))["num_frames"], 1);
    assert!(!d.join("single/frame_0001.png").exists());

    let o = sample("bad", &["model.hidden_dim=48"]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("hidden_dim") && err.contains("48") && err.contains("32"), "{err}");
}

/// Subjects, prompts and a results directory with a clip per case.
fn eval_inputs(dir: &Path, skip: usize) -> usize {
    std::fs::create_dir_all(dir.join("subjects")).unwrap();
    for s in 0..2 {
        Portrait::from_seed(s).render(32, 32, 0).save_png(&dir.join(format!("subjects/s{s}.png"))).unwrap();
    }
    std::fs::write(dir.join("prompts.txt"), "waving\nlaughing\nin the rain\n").unwrap();
    let bench = build_benchmark(&dir.join("subjects"), &dir.join("prompts.txt")).unwrap();
    for c in bench.cases.iter().skip(skip) {
        let clip = Portrait::from_seed(c.subject as u64).clip(32, 32, 4);
        save_frames(&dir.join("results").join(&c.id), &clip).unwrap();
    }
    bench.cases.len()
}

#[test]
fn eval_without_judge() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(eval_inputs(d, 0), 6);
    let args = ["eval", "--results", "results", "--subjects", "subjects", "--prompts", "prompts.txt", "--out", "ev", "--model", "probe"];
    let o = lynx(d, &args);
    ok(&o);
    assert!(stdout(&o).contains("probe"));
    let s = read_json(&d.join("ev/summary.json"));
    assert_eq!(s["summary"]["cases"], 6);
    assert_eq!(s["summary"]["partial"], false);
    assert!(s["summary"]["judge"].is_null());
    for v in s["summary"]["resemblance"].as_object().unwrap().values() {
        assert!(v.as_f64().unwrap() > 0.9, "{v}");
    }
    assert_eq!(read_json(&d.join("ev/radar.json"))["axes"].as_array().unwrap().len(), 3);
    assert!(std::fs::read_to_string(d.join("ev/summary.txt")).unwrap().starts_with("model"));
}

#[test]
fn eval_with_mock_judge_and_partial_results() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    eval_inputs(d, 1);
    let args = ["eval", "--results", "results", "--subjects", "subjects", "--prompts", "prompts.txt", "--out", "ev"];
    let o = lynx(d, &args);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("--allow-partial"), "{}", stderr(&o));

    let server = MockJudgeServer::start(vec![MockReply::scores([0.5, 0.6, 0.7, 0.8])]).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lynx"))
        .args(args)
        .arg("--allow-partial")
        .current_dir(d)
        .env("RUST_LOG", "warn")
        .env(URL_ENV, server.url())
        .output()
        .unwrap();
    ok(&o);
    assert_eq!(server.requests().len(), 5);
    let s = read_json(&d.join("ev/summary.json"));
    assert_eq!(s["summary"]["cases"], 5);
    assert_eq!(s["summary"]["partial"], true);
    assert_eq!(s["summary"]["mismatched"].as_array().unwrap().len(), 1);
    assert_eq!(s["summary"]["judge"]["aesthetic"].as_f64().unwrap(), 0.6);
    assert_eq!(read_json(&d.join("ev/radar.json"))["axes"].as_array().unwrap().len(), 7);
}

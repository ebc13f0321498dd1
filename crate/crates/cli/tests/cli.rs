use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

fn fgdi(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_fgdi"));
    cmd.args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = fgdi(args, &[]);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Defaults shrunk to a few images and one or two epochs per stage.
fn tiny(seeds: &[u64]) -> Value {
    let mut cfg: Value = serde_json::from_slice(&ok(&["default-config"]).stdout).unwrap();
    cfg["data"] = json!({
        "seed": 0, "num_domains": 3, "source_domains": [0, 1], "held_out_domain": 2,
        "pids_per_domain": 4, "images_per_pid": 4, "test_pids": 3,
        "test_images_per_pid": 4, "num_cameras": 2
    });
    cfg["train"]["plan"] = json!({
        "initial_epochs": 1, "id_token_epochs": 2, "domain_token_epochs": 1, "finetune_epochs": 1
    });
    cfg["train"]["p"] = json!(2);
    cfg["train"]["k"] = json!(2);
    cfg["seeds"] = json!(seeds);
    cfg
}

fn write_cfg(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn synth_is_idempotent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_cfg(tmp.path(), "c.json", &tiny(&[3]));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["synth", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["synth", "--config", s(&cfg), "--out", s(&b)]);
    for f in ["dataset.json", "pixels.bin"] {
        assert_eq!(
            fs::read(a.join("seed_3").join(f)).unwrap(),
            fs::read(b.join("seed_3").join(f)).unwrap()
        );
    }
    let m = read_json(&a.join("manifest.json"));
    assert!(m["finished_at"].is_string());
    assert_eq!(m["seeds"], json!([3]));
}

#[test]
fn malformed_configs_exit_with_code_1() {
    let tmp = tempfile::tempdir().unwrap();
    let mut missing = tiny(&[0]);
    missing["train"].as_object_mut().unwrap().remove("lr_prompt");
    let p = write_cfg(tmp.path(), "missing.json", &missing);
    let out = fgdi(&["synth", "--config", s(&p), "--out", s(&tmp.path().join("o"))], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("lr_prompt"), "{}", stderr(&out));

    let mut unknown = tiny(&[0]);
    unknown["tuning"] = json!(true);
    let p = write_cfg(tmp.path(), "unknown.json", &unknown);
    let out = fgdi(&["synth", "--config", s(&p), "--out", s(&tmp.path().join("o"))], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("tuning"));

    let mut version = tiny(&[0]);
    version["schema_version"] = json!(99);
    let p = write_cfg(tmp.path(), "version.json", &version);
    let out = fgdi(&["synth", "--config", s(&p), "--out", s(&tmp.path().join("o"))], &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn baseline_training_is_recorded_as_two_stages() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&[0, 1, 2]);
    cfg["toggles"] = json!({"three_stage": false, "domain_prompts": false, "apn": false});
    let p = write_cfg(tmp.path(), "c.json", &cfg);
    let out = tmp.path().join("run");
    ok(&["train", "--config", s(&p), "--out", s(&out)]);
    let m = read_json(&out.join("manifest.json"));
    assert_eq!(m["label"], "prompt_ids+finetune");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    for seed in 0..3 {
        let dir = out.join(format!("seed_{seed}"));
        assert!(dir.join("metrics.jsonl").is_file());
        assert!(dir.join("checkpoints/prompt_ids.ckpt").is_file());
        assert!(!dir.join("checkpoints/initial.ckpt").exists());
        let map = read_json(&dir.join("report.json"))["average_map"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&map));
    }
    assert_eq!(m["artifacts"].as_array().unwrap().len(), 1 + 3 * 4);

    // A completed run directory is not overwritten.
    let again = fgdi(&["train", "--config", s(&p), "--out", s(&out)], &[]);
    assert_eq!(again.status.code(), Some(1));
}

#[test]
fn resume_from_a_stage_checkpoint_matches_a_direct_run() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_cfg(tmp.path(), "c.json", &tiny(&[4]));
    let direct = tmp.path().join("direct");
    ok(&["train", "--config", s(&p), "--out", s(&direct)]);
    let ckpt = direct.join("seed_4/checkpoints/prompt_ids.ckpt");
    let resumed = tmp.path().join("resumed");
    ok(&["train", "--config", s(&p), "--out", s(&resumed), "--resume", s(&ckpt)]);
    assert_eq!(
        fs::read(direct.join("seed_4/report.json")).unwrap(),
        fs::read(resumed.join("seed_4/report.json")).unwrap()
    );
    assert_eq!(
        fs::read(direct.join("seed_4/checkpoints/finetune.ckpt")).unwrap(),
        fs::read(resumed.join("seed_4/checkpoints/finetune.ckpt")).unwrap()
    );
    assert!(!resumed.join("seed_4/checkpoints/initial.ckpt").exists());
}

#[test]
fn eval_labels_partial_checkpoints_and_rejects_mismatches() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_cfg(tmp.path(), "c.json", &tiny(&[0]));
    let (run, data) = (tmp.path().join("run"), tmp.path().join("data"));
    ok(&["train", "--config", s(&p), "--out", s(&run)]);
    ok(&["synth", "--config", s(&p), "--out", s(&data)]);
    let report_path = tmp.path().join("eval.json");
    let feats = tmp.path().join("features");
    let out = ok(&[
        "eval",
        "--checkpoint",
        s(&run.join("seed_0/checkpoints/initial.ckpt")),
        "--dataset",
        s(&data.join("seed_0")),
        "--out",
        s(&report_path),
        "--features",
        s(&feats),
    ]);
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(printed, read_json(&report_path));
    assert_eq!(printed["stages"], "initial");
    let map = printed["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    for f in ["query.bin", "query.json", "gallery.bin", "gallery.json"] {
        assert!(feats.join(f).is_file());
    }

    let mut other = tiny(&[0]);
    other["data"]["pids_per_domain"] = json!(5);
    let q = write_cfg(tmp.path(), "other.json", &other);
    let data2 = tmp.path().join("data2");
    ok(&["synth", "--config", s(&q), "--out", s(&data2)]);
    let bad = fgdi(
        &[
            "eval",
            "--checkpoint",
            s(&run.join("seed_0/checkpoints/finetune.ckpt")),
            "--dataset",
            s(&data2.join("seed_0")),
        ],
        &[],
    );
    assert_eq!(bad.status.code(), Some(1));
    assert!(stderr(&bad).contains("does not match"));
}

#[test]
fn ablation_grid_writes_one_manifest_per_arm_and_stable_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let p = write_cfg(tmp.path(), "c.json", &tiny(&[0]));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["ablate", "--config", s(&p), "--out", s(&a), "--grid", "arms"]);
    let seq = fgdi(
        &["ablate", "--config", s(&p), "--out", s(&b), "--grid", "arms"],
        &[("FGDI_DETERMINISTIC", "1")],
    );
    assert!(seq.status.success(), "{}", stderr(&seq));
    let arms = ["baseline", "plus_a", "plus_b", "plus_ab_wo_c", "plus_ab"];
    for arm in arms {
        let m = read_json(&a.join("arms").join(arm).join("manifest.json"));
        assert!(m["finished_at"].is_string());
    }
    assert_eq!(fs::read_dir(a.join("arms")).unwrap().count(), 5);
    for f in ["ablation.csv", "ablation_plot.json", "summary.csv", "summary.json"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.join("ablation.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 6);
    assert!(rows[1].starts_with("arms,baseline,0,prompt_ids+finetune,"));
    assert!(rows[1].contains(",false,false,false,0.0,0,-,"));
    assert!(rows[5].contains("+three_stage+domain_prompts+apn"));
    let plot = read_json(&a.join("ablation_plot.json"));
    assert_eq!(plot["grids"][0]["x"].as_array().unwrap().len(), 5);
}

#[test]
fn sweeps_follow_the_requested_grids() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&[0]);
    cfg["sweep"] = json!({"arms": [], "betas": [0.0, 1.0], "init_epochs": [0, 2]});
    let p = write_cfg(tmp.path(), "c.json", &cfg);
    let out = tmp.path().join("sweep");
    ok(&["ablate", "--config", s(&p), "--out", s(&out)]);
    let plot = read_json(&out.join("ablation_plot.json"));
    assert_eq!(plot["grids"][0]["x"], json!([0.0, 1.0]));
    assert_eq!(plot["grids"][1]["x"], json!([0, 2]));
    let csv = fs::read_to_string(out.join("ablation.csv")).unwrap();
    assert!(csv.contains("init_epochs,init_epochs=0,0,prompt_ids+prompt_domains+finetune,"));
}

#[test]
fn oversized_grids_are_refused_against_the_budget() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fgdi(
        &[
            "ablate",
            "--out",
            s(&tmp.path().join("big")),
            "--full-epochs",
            "--grid",
            "arms",
            "--grid",
            "beta",
            "--budget-minutes",
            "0.5",
        ],
        &[],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("estimated"), "{}", stderr(&out));
    assert!(!tmp.path().join("big").exists());
}

#[test]
fn report_aggregates_seeds() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty");
    fs::create_dir(&empty).unwrap();
    assert_eq!(fgdi(&["report", s(&empty)], &[]).status.code(), Some(1));

    let p = write_cfg(tmp.path(), "c.json", &tiny(&[0]));
    let run = tmp.path().join("run");
    ok(&["train", "--config", s(&p), "--out", s(&run)]);
    let table = String::from_utf8(ok(&["report", s(&run)]).stdout).unwrap();
    assert!(table.starts_with("stages: initial+prompt_ids+prompt_domains+finetune"));
    let summary = read_json(&run.join("summary.json"));
    let g = &summary["groups"][0];
    for metric in ["map", "rank1", "rank5", "rank10"] {
        assert_eq!(g[metric]["mean"], g[metric]["min"]);
        assert_eq!(g[metric]["mean"], g[metric]["max"]);
    }
    let first = fs::read(run.join("summary.csv")).unwrap();
    ok(&["report", s(&run)]);
    assert_eq!(first, fs::read(run.join("summary.csv")).unwrap());
}

#[test]
fn divergence_exits_with_code_2_and_io_failures_with_3() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny(&[0]);
    cfg["train"]["lr_encoder"] = json!(1e308);
    let p = write_cfg(tmp.path(), "c.json", &cfg);
    let out = fgdi(&["train", "--config", s(&p), "--out", s(&tmp.path().join("nan"))], &[]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("initial"));

    let blocker = tmp.path().join("file");
    fs::write(&blocker, "x").unwrap();
    let p = write_cfg(tmp.path(), "ok.json", &tiny(&[0]));
    let out = fgdi(&["synth", "--config", s(&p), "--out", s(&blocker.join("sub"))], &[]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    let missing = fgdi(&["synth", "--config", s(&tmp.path().join("nope.json"))], &[]);
    assert_eq!(missing.status.code(), Some(3));
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ppa_dagger::harness::{Instance, RunConfig};
use ppa_dagger::milp::{brute_force_solve, parse_mps, DEFAULT_SIZE_CAP};
use ppa_dagger::ppa::{CostParams, Patient, Priority};

fn ppa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ppa"))
        .args(args)
        .env("PPA_WORKERS", "1")
        .output()
        .expect("binary runs")
}

fn tiny_instance() -> Instance {
    let mk = |id, duration, priority, preferred, eligible: &[usize], score| Patient {
        id,
        duration,
        priority,
        preferred,
        eligible: eligible.to_vec(),
        arrival_score: score,
    };
    Instance {
        params: CostParams {
            reject: [200.0, 50.0],
            pref_ratio: 0.1,
            session_minutes: 40.0,
            capacities: vec![2, 1],
        },
        patients: vec![
            mk(0, 20.0, Priority::Regular, 0, &[0, 1], 0.1),
            mk(1, 25.0, Priority::High, 0, &[0], 0.3),
            mk(2, 15.0, Priority::Regular, 1, &[0, 1], 0.5),
            mk(3, 30.0, Priority::High, 1, &[1], 0.8),
        ],
    }
}

/// A small config that trains in a few seconds.
fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::desk();
    cfg.expert = ppa_dagger::experts::ExpertSpec::new(ppa_dagger::experts::ExpertKind::Myopic);
    cfg.dagger.episodes_per_iteration = 4;
    cfg.train.epochs = 3;
    cfg.eval.n_test_episodes = 5;
    let path = dir.join("c.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

#[test]
fn solve_matches_enumeration() {
    let dir = tempfile::tempdir().unwrap();
    let inst = tiny_instance();
    let path = dir.path().join("tiny.json");
    fs::write(&path, serde_json::to_vec(&inst).unwrap()).unwrap();
    let out = ppa(&["solve", path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let sol: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let best = brute_force_solve(
        &inst.patients,
        &inst.params.fresh_residual(),
        &inst.params,
        DEFAULT_SIZE_CAP,
    )
    .unwrap();
    assert_eq!(sol["objective"].as_f64().unwrap(), best.objective);
    assert_eq!(sol["status"], "Optimal");
}

#[test]
fn export_mps_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("tiny.json");
    fs::write(&path, serde_json::to_vec(&tiny_instance()).unwrap()).unwrap();
    let mps = dir.path().join("tiny.mps");
    let out = ppa(&["export-mps", path.to_str().unwrap(), "--out", mps.to_str().unwrap()]);
    assert!(out.status.success());
    let model = parse_mps(&fs::read(&mps).unwrap()).unwrap();
    assert_eq!(model.num_vars(), tiny_instance().model().unwrap().num_vars());
}

#[test]
fn gen_writes_episodes_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out_dir = dir.path().join("corpus");
    let out = ppa(&[
        "gen",
        "--config",
        cfg.to_str().unwrap(),
        "--n",
        "10",
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let files = fs::read_dir(&out_dir).unwrap().count();
    assert_eq!(files, 11);
    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(out_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["episodes"].as_array().unwrap().len(), 10);
}

#[test]
fn train_evaluate_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let run = dir.path().join("run");
    let out = ppa(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let records = fs::read_to_string(run.join("records.csv")).unwrap();
    assert_eq!(records.lines().count(), 2, "header plus one iteration");
    assert!(run.join("model_0001.json").exists());
    assert!(run.join("config.toml").exists());

    let eval_dir = dir.path().join("eval");
    let model = run.join("model_0001.json");
    let args = [
        "evaluate",
        "--config",
        cfg.to_str().unwrap(),
        "--model",
        model.to_str().unwrap(),
        "--out",
        eval_dir.to_str().unwrap(),
    ];
    assert!(ppa(&args).status.success());
    let metrics = fs::read_to_string(eval_dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("policy_id,episodes,avg_cost"));

    let out = ppa(&["report", run.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("best_iteration"));
}

#[test]
fn errors_are_json_on_stderr() {
    let out = ppa(&["solve", "/nonexistent/instance.json"]);
    assert!(!out.status.success());
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "io");

    let out = ppa(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "usage");

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "master_seed = 1\nunknown_section = 3\n").unwrap();
    let out = ppa(&[
        "baseline",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"], "config");
}

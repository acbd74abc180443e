use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use safeshed_cli::{exit, ExperimentConfig};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_safeshed"));
    c.env_remove("SAFESHED__ARS__ITERATIONS");
    c
}

fn repo_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml")
}

/// Tiny, fast training setup.
fn small_config(dir: &Path) -> PathBuf {
    let path = dir.join("small.toml");
    std::fs::write(
        &path,
        "seed = 5\nworkers = 2\n\n[ars]\nnum_directions = 2\ntop_b = 1\niterations = 1\n\n\
         [policy]\narch = \"linear\"\n\n[output]\nrecord_wall_time = false\n",
    )
    .unwrap();
    path
}

fn run(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("binary runs");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

#[test]
fn shipped_config_matches_defaults() {
    let text = std::fs::read_to_string(repo_config()).unwrap();
    let cfg = ExperimentConfig::from_toml(&text).unwrap();
    let mut expected = ExperimentConfig::default();
    expected.out_dir = "runs/safe".into();
    assert_eq!(cfg, expected);
}

#[test]
fn train_one_iteration_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(bin().args(["train", "-q", "--config"]).arg(small_config(dir.path())).arg("--out").arg(&out));
    assert!(o.status.success());
    for f in ["run.toml", "history.csv", "checkpoints/latest.ckpt", "checkpoints/best.ckpt"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    let lines: Vec<&str> = history.lines().collect();
    assert_eq!(lines[0], "iteration,greedy_return,violations,alpha,nu,wall_seconds");
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("1,"));
    let snapshot = safeshed_cli::commands::load_run_metadata(&out.join("run.toml")).unwrap();
    assert_eq!(snapshot.seed, 5);
    assert_eq!(snapshot.ars.iterations, 1);
}

#[test]
fn rerun_gives_identical_history() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(bin()
            .args(["train", "-q", "--set", "ars.iterations=3", "--set", "ars.eval_every=1", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(&out));
        assert!(o.status.success());
        files.push((std::fs::read(out.join("history.csv")).unwrap(), std::fs::read(out.join("checkpoints/latest.ckpt")).unwrap()));
    }
    assert_eq!(files[0], files[1]);
    assert_eq!(String::from_utf8_lossy(&files[0].0).lines().count(), 4);
}

#[test]
fn env_override_is_applied() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = run(bin()
        .env("SAFESHED__ARS__ITERATIONS", "2")
        .env("SAFESHED__ARS__EVAL_EVERY", "1")
        .args(["train", "-q", "--config"])
        .arg(small_config(dir.path()))
        .arg("--out")
        .arg(&out));
    assert!(o.status.success());
    let history = std::fs::read_to_string(out.join("history.csv")).unwrap();
    assert_eq!(history.lines().count(), 3);
}

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "seed = 1\n[reward]\nc5 = 2.0\n").unwrap();
    let o = bin().args(["train", "--config"]).arg(&path).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(exit::CONFIG));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("c5") && err.contains("line 3"), "{err}");
}

#[test]
fn corrupt_checkpoint_exits_with_load_code() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("bad.ckpt");
    std::fs::write(&ckpt, b"SAFESHED\x01\x00\x00\x00garbage").unwrap();
    let o = bin().args(["eval", "--checkpoint"]).arg(&ckpt).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(exit::LOAD));
    let o = bin().args(["eval", "--checkpoint"]).arg(dir.path().join("missing")).arg("--out").arg(dir.path()).output().unwrap();
    assert_eq!(o.status.code(), Some(exit::LOAD));
}

#[test]
fn eval_and_compare_after_training() {
    let dir = tempfile::tempdir().unwrap();
    let run_dir = dir.path().join("run");
    assert!(run(bin().args(["train", "-q", "--config"]).arg(small_config(dir.path())).arg("--out").arg(&run_dir))
        .status
        .success());
    let ckpt = run_dir.join("checkpoints/latest.ckpt");

    let eval_dir = dir.path().join("eval");
    let o = run(bin().args(["eval", "--tasks", "all", "--checkpoint"]).arg(&ckpt).arg("--out").arg(&eval_dir));
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(eval_dir.join("report.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows.iter().filter(|r| r["held_out"] == true).count(), 1);
    assert!(report["passed"].as_u64().unwrap() <= report["total"].as_u64().unwrap());
    let traj = std::fs::read_to_string(eval_dir.join("trajectories/bus7_dur0.15.csv")).unwrap();
    assert_eq!(
        traj.lines().next().unwrap(),
        "t,V_bus4,V_bus7,V_bus8,V_bus18,L_bus4,L_bus7,L_bus18,a_bus4,a_bus7,a_bus18,r,B,R,threshold"
    );

    let cmp_dir = dir.path().join("cmp");
    let o = run(bin().args(["compare", "--tasks", "train", "--safe"]).arg(&ckpt).arg("--standard").arg(&ckpt).arg("--out").arg(&cmp_dir));
    assert!(o.status.success());
    let csv = std::fs::read_to_string(cmp_dir.join("compare.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 10);
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[2], f[3]);
        assert_eq!(f[4], f[5]);
        assert_eq!(f[6], f[7]);
        assert_eq!(f[9], "tie");
    }
}

#[test]
fn baseline_reproduces_uncontrolled_response() {
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = run(bin().args(["baseline", "--tasks", "bus=4,dur=0.15;bus=4,dur=0", "--out"]).arg(&out));
        assert!(o.status.success());
        let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("baseline.json")).unwrap()).unwrap();
        assert!(report["rows"][0]["violation_steps"].as_u64().unwrap() > 0);
        assert_eq!(report["rows"][1]["violation_steps"].as_u64().unwrap(), 0);
        assert_eq!(report["rows"][1]["total_shed"].as_f64().unwrap(), 0.0);
        bytes.push(std::fs::read(out.join("baseline/bus4_dur0.15.csv")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let text = String::from_utf8(bytes.pop().unwrap()).unwrap();
    // Threshold is blank until the fault clears at 1.15 s.
    let first = text.lines().nth(1).unwrap();
    assert!(first.ends_with(','), "{first}");
    let rows = text.lines().count() - 1;
    assert!(rows > 0 && rows <= 100, "{rows}");
}

use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
master_seed = 4

[world]
n_users = 30
n_train_queries = 120
n_eval_queries = 60
n_probe_queries = 30

[world.catalog]
n_songs = 400

[base]
steps = 5

[boundary]
zero_steps = 5
controllable_steps = 12
upper_steps = 5

[cptlab]
seeds = 2
sweep_seeds = 2

[cptlab.corpus]
n_songs = 60
n_general = 200
n_brm_general = 400
n_dev = 60
"#;

fn bin(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_boundary-lab"))
        .args(args)
        .current_dir(dir)
        .env_remove("BOUNDARY_LAB_SEED")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_small(dir: &Path) -> String {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p.display().to_string()
}

#[test]
fn gamma_out_of_range_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let o = bin(&["--out", "o", "worldgen", "--reward.gamma=1.3"], d.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("reward.gamma must lie in (0, 1], got 1.3"), "{}", stderr(&o));
    assert!(!d.path().join("o").exists());
}

#[test]
fn missing_input_names_the_file() {
    let d = tempfile::tempdir().unwrap();
    let o = bin(&["--out", "o", "distill"], d.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("worldgen/world_meta.json"), "{}", stderr(&o));
    let o = bin(&["--config", "nope.toml", "worldgen"], d.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("nope.toml"));
}

fn manifest_matches_files(stage_dir: &Path) {
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(stage_dir.join("manifest.json")).unwrap()).unwrap();
    let files = m["files"].as_array().unwrap();
    assert!(files.iter().any(|f| f["path"] == "config.toml"));
    assert!(files.iter().any(|f| f["path"] == "seed.txt"));
    for f in files {
        let bytes = std::fs::read(stage_dir.join(f["path"].as_str().unwrap())).unwrap();
        assert_eq!(f["bytes"].as_u64().unwrap(), bytes.len() as u64);
    }
}

#[test]
fn stages_chain_through_files() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_small(d.path());
    let run = |args: &[&str]| {
        let mut full = vec!["--config", cfg.as_str(), "--out", "run"];
        full.extend_from_slice(args);
        let o = bin(&full, d.path());
        assert!(o.status.success(), "{args:?}: {}", stderr(&o));
    };
    run(&["worldgen"]);
    run(&["train-base", "--dump-rewards"]);
    run(&["distill"]);
    run(&["train-zero"]);
    run(&["boundary"]);
    run(&["cptlab"]);
    run(&["bench", "--workers", "2"]);
    let root = d.path().join("run");
    for stage in ["worldgen", "train-base", "distill", "train-zero", "boundary", "cptlab", "bench"] {
        manifest_matches_files(&root.join(stage));
        assert_eq!(std::fs::read_to_string(root.join(stage).join("seed.txt")).unwrap(), "4\n");
    }
    assert!(root.join("train-base/rewards.jsonl").exists());
    for f in ["labels.jsonl", "dataset.jsonl", "sft.json", "m1.json", "summary.json"] {
        assert!(root.join("boundary").join(f).exists(), "{f}");
    }
    let snapshot = std::fs::read_to_string(root.join("bench/config.toml")).unwrap();
    assert!(snapshot.contains("n_train_queries = 120"));

    // Bench from another input root leaves that root untouched.
    let before = std::fs::read(root.join("boundary/manifest.json")).unwrap();
    let o = bin(&["--config", cfg.as_str(), "--input", "run", "--out", "other", "bench", "--params", "run/boundary/sft.json"], d.path());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(d.path().join("other/bench/report.json").exists());
    assert!(!d.path().join("other/boundary").exists());
    assert_eq!(before, std::fs::read(root.join("boundary/manifest.json")).unwrap());
}

#[test]
fn reruns_hash_identically_and_seed_env_applies() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_small(d.path());
    for out in ["a", "b"] {
        assert!(bin(&["--config", &cfg, "--out", out, "worldgen"], d.path()).status.success());
        assert!(bin(&["--config", &cfg, "--out", out, "train-base"], d.path()).status.success());
    }
    for stage in ["worldgen", "train-base"] {
        let m = |o: &str| std::fs::read(d.path().join(o).join(stage).join("manifest.json")).unwrap();
        assert_eq!(m("a"), m("b"), "{stage}");
    }
    let o = Command::new(env!("CARGO_BIN_EXE_boundary-lab"))
        .args(["--config", &cfg, "--out", "c", "worldgen"])
        .current_dir(d.path())
        .env("BOUNDARY_LAB_SEED", "11")
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(std::fs::read_to_string(d.path().join("c/worldgen/seed.txt")).unwrap(), "11\n");
    assert_ne!(
        std::fs::read(d.path().join("a/worldgen/catalog.jsonl")).unwrap(),
        std::fs::read(d.path().join("c/worldgen/catalog.jsonl")).unwrap()
    );
}

#[test]
fn repro_subset_reports_and_exits_zero() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_small(d.path());
    let o = bin(
        &["--config", &cfg, "--out", "r", "repro", "--repro.criteria=[1, 2, 12]"],
        d.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(out.lines().filter(|l| l.starts_with("criterion")).count(), 3, "{out}");
    assert!(d.path().join("r/repro/summary.json").exists());
    assert!(d.path().join("r/repro/manifest.json").exists());
}

#[test]
fn repro_failure_exits_nonzero() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_small(d.path());
    // 50 groups is below the 1000 the oracle criterion demands.
    let o = bin(&["--config", &cfg, "--out", "r", "repro", "--repro.criteria=[1]", "--repro.oracle_groups=50"], d.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stdout).contains("criterion  1 FAIL"));
}

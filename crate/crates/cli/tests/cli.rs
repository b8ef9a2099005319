use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn essential(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_essential"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn missing_config_is_exit_2() {
    let o = essential(&["run", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_config_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "tasks = many\n").unwrap();
    let o = essential(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let o = essential(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.contains("PASS op:gelu"));
    assert!(!out.contains("FAIL"));
}

#[test]
fn corrupted_gelu_backward_is_named() {
    let o = essential(&["gradcheck", "--corrupt", "gelu"]);
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("FAIL op:gelu"), "{out}");
    assert!(out.contains("PASS op:softmax"), "{out}");
}

#[test]
fn impossible_tolerance_fails() {
    let o = essential(&["gradcheck", "--tol", "1e-30"]);
    assert_eq!(o.status.code(), Some(1));
    let o = essential(&["gradcheck", "--tol", "-1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unknown_preset_is_exit_2() {
    let cfg = smoke_config();
    let o = essential(&["ablate", "--preset", "everything", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_incomplete_run_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("results.csv"), "task,aa\n").unwrap();
    let o = essential(&["analyze", "--run", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn smoke_run_is_reproducible_and_analyzable() {
    let cfg = smoke_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        let o = essential(&["run", "--config", cfg.to_str().unwrap(), "--out", d.path().to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(stdout(&o).contains("task 1: AA"));
    }
    let manifest = |d: &tempfile::TempDir| {
        let text = std::fs::read_to_string(d.path().join("manifest.txt")).unwrap();
        text.lines().filter(|l| !l.starts_with("out_dir")).collect::<Vec<_>>().join("\n")
    };
    assert_eq!(manifest(&dirs[0]), manifest(&dirs[1]));
    for f in ["results.csv", "memory.bin", "model.bin"] {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs between identical runs");
    }
    let o = essential(&["analyze", "--run", dirs[0].path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.starts_with("task,clips,d_sparse,d_retrieved,d_random\n1,"), "{out}");
    assert!(out.contains("verdict:"));
}

#[test]
fn seed_override_changes_results() {
    let cfg = smoke_config();
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for (d, seed) in dirs.iter().zip(["1", "2"]) {
        let o = essential(&[
            "run",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            seed,
            "--out",
            d.path().to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0));
    }
    let read = |d: &tempfile::TempDir| std::fs::read(d.path().join("memory.bin")).unwrap();
    assert_ne!(read(&dirs[0]), read(&dirs[1]));
}

use std::path::{Path, PathBuf};
use std::process::Command;

fn ddkl() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ddkl"));
    cmd.env("RUST_LOG", "warn").env_remove("DDKL_OUT_DIR");
    cmd
}

fn bundled(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(config: &str, out: &Path, extra: &[&str]) {
    let status = ddkl()
        .arg("run")
        .arg(bundled(config))
        .arg("--out")
        .arg(out)
        .args(extra)
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn same_seed_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        run("fig3_small.cfg", out, &["--max-batches", "3", "--seed", "9"]);
    }
    for file in ["metrics.csv", "metrics_ddkl1.csv", "estimation.csv", "consensus.csv"] {
        assert_eq!(std::fs::read(a.join(file)).unwrap(), std::fs::read(b.join(file)).unwrap(), "{file}");
    }
}

#[test]
fn single_agent_consensus_column_is_zero() {
    let dir = tempfile::tempdir().unwrap();
    run("single_agent.cfg", dir.path(), &[]);
    let text = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header, ["tau", "s", "agent", "loss", "l1", "l2", "h_gap", "state_err", "grad_norm"]);
    let mut rows = 0;
    for line in lines {
        assert_eq!(line.split(',').nth(4), Some("0"), "{line}");
        rows += 1;
    }
    assert!(rows > 0);
}

#[test]
fn run_writes_manifest_models_and_plot_scripts() {
    let dir = tempfile::tempdir().unwrap();
    run("vdp_pair.cfg", dir.path(), &["--max-batches", "3"]);
    let manifest = std::fs::read_to_string(dir.path().join("manifest.toml")).unwrap();
    assert!(manifest.contains("sha256"));
    for script in ["plot_estimation.py", "plot_consensus.py"] {
        assert!(dir.path().join(script).exists(), "{script}");
    }
    assert!(std::fs::read_dir(dir.path().join("models/ddkl")).unwrap().count() > 0);
}

#[test]
fn out_dir_can_come_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let status = ddkl()
        .env("DDKL_OUT_DIR", dir.path())
        .arg("run")
        .arg(bundled("single_agent.cfg"))
        .args(["--max-batches", "2"])
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("metrics.csv").exists());
}

#[test]
fn check_passes_bundled_setup() {
    let out = ddkl().arg("check").arg(bundled("fig3_full.cfg")).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().all(|l| l.starts_with("PASS")), "{text}");
}

#[test]
fn check_flags_short_batches_and_dropped_agent() {
    let dir = tempfile::tempdir().unwrap();
    let base = std::fs::read_to_string(bundled("fig3_small.cfg")).unwrap();

    let short = dir.path().join("short.cfg");
    std::fs::write(&short, base.replace("beta = 20", "beta = 9")).unwrap();
    let out = ddkl().arg("check").arg(&short).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stdout).contains("FAIL beta-vs-r-plus-m"));

    let dropped = dir.path().join("dropped.cfg");
    let (head, rest) = base.split_once("[graph]").unwrap();
    let engine = rest.split_once("[engine]").unwrap().1;
    let text = format!(
        "{}[graph]\nkind = \"complete\"\n\n[engine]{engine}",
        head.replace("[[agents]]\nc = [[0, 0, 0, 0, 0, 1]]\n", "")
    );
    std::fs::write(&dropped, text).unwrap();
    let out = ddkl().arg("check").arg(&dropped).output().unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("WARN stacked-c-rank: rank 5"), "{text}");
}

#[test]
fn oracle_suites_pass() {
    let out = ddkl().args(["oracle", "all"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 3, "{text}");
}

#[test]
fn unknown_config_field_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    let base = std::fs::read_to_string(bundled("single_agent.cfg")).unwrap();
    std::fs::write(&path, base.replace("max_inner = 50", "max_iner = 50")).unwrap();
    let out = ddkl().arg("run").arg(&path).output().unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("max_iner"));
}

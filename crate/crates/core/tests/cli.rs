//! End-to-end runs of the `slicekit` binary on tiny configs.

use std::path::Path;
use std::process::Command;

fn slicekit() -> Command {
    Command::new(env!("CARGO_BIN_EXE_slicekit"))
}

const TINY: &[&str] = &[
    "dataset.n=3000",
    "backbone.hidden=[8]",
    "backbone.d=5",
    "hp.pretrain_epochs=3",
    "hp.finetune_epochs=3",
    r#"grid={"lr":[0.01],"l2":[0.0]}"#,
    "grid_resolution=20",
];

fn run(exp: &str, out: &Path, extra: &[&str], threads: &str) -> std::process::Output {
    let mut cmd = slicekit();
    cmd.arg(exp)
        .arg("--out")
        .arg(out)
        .env("SLICEKIT_THREADS", threads);
    for s in TINY.iter().chain(extra) {
        cmd.arg("--set").arg(s);
    }
    cmd.output().unwrap()
}

#[test]
fn overview_writes_layout_and_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = run("overview", a.path(), &["seeds=[0,1]"], "1");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run("overview", b.path(), &["seeds=[0,1]"], "2");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let exp = a.path().join("overview");
    for f in [
        "summary.csv",
        "summary.json",
        "pretrain/0/record.jsonl",
        "sbl/1/record.jsonl",
        "sbl/1/model.params",
    ] {
        assert!(exp.join(f).is_file(), "missing {f}");
    }
    assert!(std::fs::read_dir(exp.join("figures")).unwrap().count() > 0);

    let csv_a = std::fs::read_to_string(exp.join("summary.csv")).unwrap();
    let csv_b = std::fs::read_to_string(b.path().join("overview/summary.csv")).unwrap();
    assert_eq!(csv_a, csv_b);
    let header = csv_a.lines().next().unwrap();
    assert!(
        header.starts_with("experiment,variant,method,seed,overall_f1,mean_slice_f1,s_1_f1,s_2_f1"),
        "{header}"
    );

    let report = slicekit().arg("report").arg(a.path()).output().unwrap();
    assert!(report.status.success());
    assert!(a.path().join("report.json").is_file());
}

#[test]
fn bad_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = run("overview", dir.path(), &["no_such_key=1"], "1");
    assert_eq!(out.status.code(), Some(2));
    let out = run("overview", dir.path(), &["dataset.radius=0.0"], "1");
    assert_eq!(out.status.code(), Some(2));
    let cfg = dir.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"experiment": "overview", "schema_version": 1, "hp": {"lr": -1.0}}"#,
    )
    .unwrap();
    let out = slicekit()
        .arg("overview")
        .arg("--config")
        .arg(&cfg)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        "overview",
        dir.path(),
        &[
            "seeds=[0]",
            r#"grid={"lr":[1e200],"l2":[1.0]}"#,
            r#"hp.optimizer="sgd""#,
        ],
        "1",
    );
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn missed_threshold_with_check_exits_4() {
    // Ablation needs at least 10 seeds, so a single-seed run cannot pass.
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = slicekit();
    cmd.args(["ablate", "--check", "--seeds", "1", "--out"])
        .arg(dir.path());
    for s in TINY {
        cmd.arg("--set").arg(s);
    }
    let out = cmd.output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("FAIL"), "{text}");
}

//! The stage subcommands and flags of the `modeldiff` binary.

use std::process::Command;

fn modeldiff() -> Command {
    Command::new(env!("CARGO_BIN_EXE_modeldiff"))
}

#[test]
fn pipeline_runs_on_the_length_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let output = modeldiff()
        .args(["--mock", "length", "--seed", "11"])
        .arg("--run-dir")
        .arg(dir.path())
        .arg("pipeline")
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(dir.path().join("run/report.jsonl").exists());
    assert!(dir.path().join("run/manifest.json").exists());
}

#[test]
fn stage_order_is_enforced_with_a_helpful_error() {
    let dir = tempfile::tempdir().unwrap();
    let output = modeldiff()
        .args(["--mock", "length", "--seed", "11"])
        .arg("--run-dir")
        .arg(dir.path())
        .arg("report")
        .output()
        .unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("run `judge-heldout` first"), "{stderr}");
}

#[test]
fn config_or_mock_is_required() {
    let output = modeldiff().arg("collect").output().unwrap();
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("--config") && stderr.contains("--mock"), "{stderr}");
}

#[test]
fn stage_by_stage_matches_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    for stage in ["collect", "diff-llm", "judge-gen", "judge-heldout", "rate", "report"] {
        let output = modeldiff()
            .args(["--mock", "length", "--seed", "11"])
            .arg("--run-dir")
            .arg(dir.path())
            .arg(stage)
            .output()
            .unwrap();
        assert!(
            output.status.success(),
            "{stage} failed: {}",
            String::from_utf8_lossy(&output.stderr)
        );
    }
    let report = std::fs::read_to_string(dir.path().join("run/report.jsonl")).unwrap();
    assert!(report.contains("shorter"), "{report}");
}

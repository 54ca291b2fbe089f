//! End-to-end pipeline runs over the bundled fixtures.

use modeldiff::runner::{
    fixture_run_config, Runner, Stage, ACCEPTANCE_FILE, EVAL_FILE, GENERATION_FILE,
    HYPOTHESES_KL_FILE, HYPOTHESES_LLM_FILE, HYPOTHESES_SAE_FILE, RATINGS_FILE, REPORT_FILE,
    RESPONSE_STATS_FILE, SUMMARY_FILE,
};
use modeldiff::runner::report::ReportRow;
use modeldiff::{Direction, Hypothesis, Method};

fn read_rows<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Vec<T> {
    modeldiff::jsonl::read_all(path).unwrap()
}

#[test]
fn table_fixture_full_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_run_config("table", 12, dir.path()).unwrap();
    let run_dir = config.run_dir.clone();
    let mut runner = Runner::new(config).unwrap();
    runner.run_pipeline().unwrap();

    // 1500 triplets split 1000 / 500
    let generation: Vec<modeldiff::corpus::Triplet> = read_rows(&run_dir.join(GENERATION_FILE));
    assert_eq!(generation.len(), 1000);

    // the LLM pipeline surfaces the table behavior and the never-confirmed
    // greeting theme
    let llm: Vec<Hypothesis> = read_rows(&run_dir.join(HYPOTHESES_LLM_FILE));
    assert!(
        llm.iter()
            .any(|h| h.text.to_lowercase().contains("table") && h.direction == Direction::B),
        "llm hypotheses: {llm:?}"
    );

    // the SAE pipeline finds the table-syntax feature
    let sae: Vec<Hypothesis> = read_rows(&run_dir.join(HYPOTHESES_SAE_FILE));
    assert!(
        sae.iter()
            .any(|h| h.text.to_lowercase().contains("table") && h.direction == Direction::B),
        "sae hypotheses: {sae:?}"
    );

    // the KL probe sees the display-math fork
    let kl: Vec<Hypothesis> = read_rows(&run_dir.join(HYPOTHESES_KL_FILE));
    assert!(
        kl.iter().any(|h| h.method == Method::Kl && h.direction == Direction::B),
        "kl hypotheses: {kl:?}"
    );

    // acceptance keeps the confirmed themes and drops the greeting filler
    let acceptance: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join(ACCEPTANCE_FILE)).unwrap())
            .unwrap();
    let accepted = acceptance["overall"]["accepted_ids"].as_array().unwrap();
    assert!(!accepted.is_empty());

    // report rows exist for every accepted hypothesis, with ratings
    let rows: Vec<ReportRow> = read_rows(&run_dir.join(REPORT_FILE));
    assert_eq!(rows.len(), accepted.len());
    for row in &rows {
        assert!(row.accepted);
        assert!(row.interestingness.is_some());
        assert!(row.abstraction.is_some());
    }
    let table_row = rows
        .iter()
        .find(|r| r.method == Method::Llm && r.text.to_lowercase().contains("table"))
        .expect("table report row");
    assert!((0.09..=0.15).contains(&table_row.f), "f = {}", table_row.f);
    assert_eq!(table_row.acc, Some(1.0));

    for file in [EVAL_FILE, RATINGS_FILE, SUMMARY_FILE, RESPONSE_STATS_FILE] {
        assert!(run_dir.join(file).exists(), "{file} missing");
    }
    let summary = std::fs::read_to_string(run_dir.join(SUMMARY_FILE)).unwrap();
    assert!(summary.contains("llm,acceptance_rate"));
    assert!(summary.contains("sae,acceptance_rate"));
}

#[test]
fn length_fixture_pipeline_reports_shorter_hypothesis() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_run_config("length", 11, dir.path()).unwrap();
    let run_dir = config.run_dir.clone();
    let mut runner = Runner::new(config).unwrap();
    runner.run_pipeline().unwrap();

    let rows: Vec<ReportRow> = read_rows(&run_dir.join(REPORT_FILE));
    let shorter = rows
        .iter()
        .find(|r| r.text.to_lowercase().contains("shorter"))
        .expect("shorter-responses hypothesis");
    assert_eq!(shorter.direction, Direction::A);
    assert_eq!(shorter.acc, Some(1.0));
    assert!(shorter.f > 0.95);

    let stats: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join(RESPONSE_STATS_FILE)).unwrap())
            .unwrap();
    let mean_a = stats["mean_tokens_a"].as_f64().unwrap();
    let mean_b = stats["mean_tokens_b"].as_f64().unwrap();
    assert!((60.0..=80.0).contains(&mean_a), "mean_a {mean_a}");
    assert!((470.0..=530.0).contains(&mean_b), "mean_b {mean_b}");
    assert!(mean_b / mean_a > 5.0);
}

#[test]
fn stage_reruns_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixture_run_config("length", 3, dir.path()).unwrap();
    let run_dir = config.run_dir.clone();
    let mut runner = Runner::new(config.clone()).unwrap();
    runner.run(Stage::Collect).unwrap();
    runner.run(Stage::DiffLlm).unwrap();
    let first = modeldiff::runner::manifest::file_sha256(&run_dir.join(HYPOTHESES_LLM_FILE)).unwrap();

    let mut rerun = Runner::new(config).unwrap();
    rerun.run(Stage::DiffLlm).unwrap();
    let second = modeldiff::runner::manifest::file_sha256(&run_dir.join(HYPOTHESES_LLM_FILE)).unwrap();
    assert_eq!(first, second);
}

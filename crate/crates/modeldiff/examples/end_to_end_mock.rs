//! The full pipeline over the bundled `table` fixture: collect, both
//! diffing methods, generation-set judging with acceptance, held-out
//! judging, autorating, fork analysis, and the final report.
//!
//! ```bash
//! cargo run -p modeldiff --example end_to_end_mock
//! ```

use modeldiff::runner::report::ReportRow;
use modeldiff::runner::{fixture_run_config, Runner, REPORT_FILE, SUMMARY_FILE};

fn main() -> anyhow::Result<()> {
    let base = tempfile::tempdir()?;
    let config = fixture_run_config("table", 12, base.path())?;
    let run_dir = config.run_dir.clone();

    println!("running all stages: {:?}", config.run.stages);
    let mut runner = Runner::new(config)?;
    runner.run_pipeline()?;

    let rows: Vec<ReportRow> = modeldiff::jsonl::read_all(&run_dir.join(REPORT_FILE))?;
    println!("\naccepted hypotheses on held-out data:");
    println!(
        "{:<10} {:<6} {:<4} {:>6} {:>6} {:>6} {:>5} {:>5}  text",
        "id", "method", "dir", "f", "acc", "vfd", "int", "abs"
    );
    for r in &rows {
        println!(
            "{:<10} {:<6} {:<4} {:>6.3} {:>6} {:>6.3} {:>5} {:>5}  {}",
            r.hypothesis_id,
            r.method.to_string(),
            r.direction.to_string(),
            r.f,
            r.acc.map(|a| format!("{a:.3}")).unwrap_or_else(|| "n/a".into()),
            r.vfd,
            r.interestingness.map(|v| format!("{v:.2}")).unwrap_or_default(),
            r.abstraction.map(|v| format!("{v:.2}")).unwrap_or_default(),
            r.text
        );
    }

    println!("\nper-method summary (mean, 95% t-interval half-width, n):");
    print!("{}", std::fs::read_to_string(run_dir.join(SUMMARY_FILE))?);

    let manifest = runner.manifest();
    println!(
        "run {} complete: {} prompts, {} triplets, {} hypotheses, {} verdicts",
        manifest.run_id,
        manifest.counts.prompts,
        manifest.counts.triplets,
        manifest.counts.hypotheses,
        manifest.counts.verdicts
    );
    Ok(())
}

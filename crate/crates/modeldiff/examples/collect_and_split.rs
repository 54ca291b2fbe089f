//! Load prompts, collect paired responses from two mock models, and split
//! the triplets into generation and held-out sets.
//!
//! ```bash
//! cargo run -p modeldiff --example collect_and_split
//! ```

use std::io::Write;

use modeldiff::corpus::{collect_pairs, load_prompts, split_corpus};
use modeldiff::gateway::mock::MockBackend;
use modeldiff::gateway::GenerationConfig;

fn main() -> anyhow::Result<()> {
    // a small prompts file in the line-delimited JSON format
    let dir = tempfile::tempdir()?;
    let prompts_path = dir.path().join("prompts.jsonl");
    let mut file = std::fs::File::create(&prompts_path)?;
    for i in 1..=30 {
        writeln!(
            file,
            r#"{{"id": "p{i:02}", "text": "Question {i}: what should I know about topic {i}?"}}"#
        )?;
    }

    let prompts = load_prompts(&prompts_path, None)?;
    println!("loaded {} prompts", prompts.len());

    // two mock models that answer deterministically
    let mut mock = MockBackend::new();
    for p in &prompts {
        mock.script_text("model-a", &p.text, format!("A says: {}", p.text));
        mock.script_text("model-b", &p.text, format!("B says, at length: {}", p.text));
    }

    let gen = GenerationConfig::default();
    let outcome = collect_pairs(&mock, &prompts, "model-a", "model-b", &gen, 4)?;
    println!(
        "collected {} triplets ({} skipped)",
        outcome.triplets.len(),
        outcome.skipped.len()
    );

    let split = split_corpus(outcome.triplets, 20, 10, 7)?;
    println!(
        "split: {} generation / {} held-out (seed {})",
        split.generation.len(),
        split.heldout.len(),
        split.seed
    );
    println!(
        "first generation triplet: {} -> {:?}",
        split.generation[0].prompt_id, split.generation[0].response_a
    );
    Ok(())
}

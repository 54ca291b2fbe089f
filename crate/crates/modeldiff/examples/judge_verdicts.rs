//! The comparative judge: batched hypotheses, seeded position swapping, and
//! verdict resolution, including a demonstration that the 50% swap cancels
//! a position-biased judge.
//!
//! ```bash
//! cargo run -p modeldiff --example judge_verdicts
//! ```

use modeldiff::corpus::Triplet;
use modeldiff::gateway::mock::MockBackend;
use modeldiff::judge::judge_batch;
use modeldiff::prompts::PromptTemplates;
use modeldiff::{Direction, Hypothesis, Method};

fn hypothesis(id: &str, text: &str, direction: Direction) -> Hypothesis {
    Hypothesis {
        id: id.into(),
        text: text.into(),
        direction,
        method: Method::Llm,
        support: 10,
        majority_fraction: 1.0,
    }
}

fn main() -> anyhow::Result<()> {
    let templates = PromptTemplates::builtin();
    let triplet = Triplet {
        prompt_id: "t1".into(),
        prompt: "Summarize the meeting notes".into(),
        response_a: "Short summary.".into(),
        response_b: "| topic | owner |\n| --- | --- |\n| budget | sam |".into(),
        model_a: "baseline".into(),
        model_b: "candidate".into(),
    };

    // an honest mock judge that checks for a Markdown table in whichever
    // displayed response actually has one
    let mut mock = MockBackend::new();
    mock.register_responder("judge", |req, _| {
        let r1_has_table = req
            .user
            .split("**Model 1 Response:**")
            .nth(1)
            .is_some_and(|rest| rest.split("**Model 2 Response:**").next().unwrap_or("").contains('|'));
        let output = serde_json::json!({
            "H1": if r1_has_table { 1 } else { 2 },
            "H2": "N/A",
        });
        Ok(output.to_string())
    });

    let hypotheses = vec![
        hypothesis("h-table", "Uses tables to present structured information", Direction::B),
        hypothesis("h-emoji", "Uses more emoji", Direction::A),
    ];
    let outcome = judge_batch(&mock, &templates, "judge", &hypotheses, &triplet, 42)?;
    for v in &outcome.verdicts {
        println!(
            "{}: raw {:?} swapped {} -> verdict {:+}",
            v.hypothesis_id, v.raw_choice, v.swapped, v.value
        );
    }

    // debiasing: a judge that always answers "1" regardless of content
    // resolves to ~50% accuracy across seeds because of the random swap
    let mut biased = MockBackend::new();
    biased.register_responder("judge", |_req, _| Ok(r#"{"H1": 1}"#.to_string()));
    let single = vec![hypothesis("h", "Provides short answers", Direction::A)];
    let trials = 1000;
    let correct = (0..trials)
        .filter(|&seed| {
            judge_batch(&biased, &templates, "judge", &single, &triplet, seed)
                .unwrap()
                .verdicts[0]
                .value
                == 1
        })
        .count();
    println!(
        "position-biased judge over {trials} seeded trials: accuracy {:.3} (the swap pulls it to ~0.5)",
        correct as f64 / trials as f64
    );
    Ok(())
}

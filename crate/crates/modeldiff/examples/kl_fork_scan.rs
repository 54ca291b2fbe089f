//! Fork-token analysis: entropy-normalized KL scoring over top-k logprobs,
//! fork selection, completion resampling, and hypothesis generation.
//!
//! ```bash
//! cargo run -p modeldiff --example kl_fork_scan
//! ```

use modeldiff::gateway::mock::MockBackend;
use modeldiff::gateway::LogprobDump;
use modeldiff::kl_fork::{
    find_fork_tokens, hypothesize_from_forks, positional_score, sample_fork_completions,
};
use modeldiff::prompts::PromptTemplates;

fn main() -> anyhow::Result<()> {
    // positional score on a hand-checkable pair of distributions
    let p1 = vec![("$$".to_string(), 0.9f64.ln()), ("$".to_string(), 0.1f64.ln())];
    let p2 = vec![("$".to_string(), 0.5f64.ln()), ("$$".to_string(), 0.5f64.ln())];
    let score = positional_score(0, &p1, &p2)?;
    println!(
        "P1=(0.9,0.1) vs P2=(0.5,0.5): kl={:.4} h1={:.4} h2={:.4} score={:.4}",
        score.kl, score.h1, score.h2, score.score
    );

    // a response scanned against both models' per-position top-k lists;
    // only the math-delimiter position disagrees
    let tokens: Vec<String> = ["The", " equation", " is", " $$"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let agree = |tok: &str| vec![(tok.to_string(), 0.97f64.ln()), (" or".to_string(), 0.03f64.ln())];
    let mut per_position_1: Vec<Vec<(String, f64)>> = tokens.iter().map(|t| agree(t)).collect();
    let mut per_position_2 = per_position_1.clone();
    per_position_1[3] = vec![(" $$".to_string(), 0.9f64.ln()), (" $".to_string(), 0.1f64.ln())];
    per_position_2[3] = vec![(" $".to_string(), 0.9f64.ln()), (" $$".to_string(), 0.1f64.ln())];
    let dump1 = LogprobDump {
        tokens: tokens.clone(),
        per_position: per_position_1,
    };
    let dump2 = LogprobDump {
        tokens: tokens.clone(),
        per_position: per_position_2,
    };

    let forks = find_fork_tokens("t1", "Solve the least squares system", &tokens, &dump1, &dump2, 1)?;
    let fork = &forks[0];
    println!(
        "top fork: position {} token {:?} score {:.4} (prefix {:?})",
        fork.score.position, fork.fork_token, fork.score.score, fork.response_prefix
    );

    // both models continue from the fork prefix; one prefers $$...$$
    let mut mock = MockBackend::new();
    mock.register_responder("model-1", |_req, idx| {
        Ok(format!(" $$x = {idx}$$ in display math"))
    });
    mock.register_responder("model-2", |_req, idx| {
        Ok(format!(" $x = {idx}$ inline"))
    });
    mock.register_responder("generator", |_req, _| {
        Ok(r#"[{"text": "Uses double dollar sign display math delimiters", "direction": "A"}]"#
            .to_string())
    });

    let (c1, c2) = sample_fork_completions(&mock, fork, "model-1", "model-2", 20, 1.0, 32)?;
    println!("sampled {} + {} completions at the fork", c1.len(), c2.len());
    println!("  model-1 sample: {:?}", c1[0]);
    println!("  model-2 sample: {:?}", c2[0]);

    let templates = PromptTemplates::builtin();
    let hypotheses = hypothesize_from_forks(&mock, &templates, "generator", None, fork, &c1, &c2)?;
    for h in &hypotheses {
        println!("hypothesis {} [{}] direction {}: {}", h.id, h.method, h.direction, h.text);
    }
    Ok(())
}

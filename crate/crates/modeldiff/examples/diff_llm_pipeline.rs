//! The LLM-based diffing pipeline end to end on mock roles: difference
//! extraction, attribution normalization, embedding, PCA, HDBSCAN, cluster
//! summarization, and direction assignment.
//!
//! ```bash
//! cargo run -p modeldiff --example diff_llm_pipeline
//! ```

use modeldiff::corpus::Triplet;
use modeldiff::diff_llm::{run_llm_pipeline, LlmPipelineConfig};
use modeldiff::gateway::mock::MockBackend;
use modeldiff::prompts::PromptTemplates;

fn main() -> anyhow::Result<()> {
    // 20 triplets: model B pads its answers with a closing disclaimer on
    // every prompt, and model A answers tersely
    let triplets: Vec<Triplet> = (1..=20)
        .map(|i| Triplet {
            prompt_id: format!("p{i:02}"),
            prompt: format!("Explain concept {i}"),
            response_a: format!("Concept {i} in one line."),
            response_b: format!(
                "Concept {i}, explained at length. Note: consult a professional before acting."
            ),
            model_a: "terse".into(),
            model_b: "cautious".into(),
        })
        .collect();

    // the extractor reacts to the rendered prompt: it sees the disclaimer
    // in response B and the brevity of response A
    let mut mock = MockBackend::new();
    mock.register_responder("extractor", |req, _| {
        let differences: Vec<&str> = if req.user.contains("consult a professional") {
            vec![
                "Model B appends a cautionary disclaimer",
                "Model A provides shorter responses",
            ]
        } else {
            vec![]
        };
        Ok(serde_json::to_string(&differences).unwrap())
    });
    mock.register_responder("summarizer", |req, _| {
        // summarize whichever theme dominates the cluster being shown
        if req.user.contains("disclaimer") {
            Ok("Appends a cautionary disclaimer".to_string())
        } else {
            Ok("Provides shorter responses".to_string())
        }
    });

    let config = LlmPipelineConfig {
        min_cluster_size: 8,
        ..LlmPipelineConfig::default()
    };
    let templates = PromptTemplates::builtin();
    let output = run_llm_pipeline(&mock, &templates, &config, &triplets, None)?;

    println!("extracted {} difference records", output.differences.len());
    println!(
        "example record: {:?} (attributed to model {}, neutral form {:?})",
        output.differences[0].text,
        output.differences[0].attributed_to,
        output.differences[0].neutral_text
    );
    println!(
        "clusters discarded by the direction threshold: {}",
        output.discarded_clusters
    );
    println!("hypotheses:");
    for h in &output.hypotheses {
        println!(
            "  {} [{}] direction {} support {} majority {:.2}: {}",
            h.id, h.method, h.direction, h.support, h.majority_fraction, h.text
        );
    }
    Ok(())
}

//! The SAE-based diffing pipeline on a synthetic activation dump:
//! completion-token max-pooling, activation-frequency differencing,
//! candidate selection, relabeling, summarization, and phrasing adjustment.
//!
//! ```bash
//! cargo run -p modeldiff --example diff_sae_pipeline
//! ```

use modeldiff::diff_sae::{
    adjust_phrasing, feature_frequency_diff, pool_completion, relabel_feature, select_candidates,
    summarize_to_hypotheses, ActivationDump, ActivationEntry, TextMeta,
};
use modeldiff::gateway::mock::MockBackend;
use modeldiff::prompts::PromptTemplates;

fn texts(prefix: &str, n: usize) -> Vec<TextMeta> {
    (0..n)
        .map(|i| TextMeta {
            text_id: format!("{prefix}{i:02}"),
            completion_start: 5,
            total_tokens: 30,
        })
        .collect()
}

fn main() -> anyhow::Result<()> {
    // model B's responses light up feature 42 (math notation) on 60% of
    // texts; model A's almost never. Feature 3 is background noise.
    let n = 20;
    let mut entries_a = Vec::new();
    let mut entries_b = Vec::new();
    for i in 0..n {
        if i % 5 == 0 {
            entries_a.push(ActivationEntry {
                text_id: format!("a{i:02}"),
                token: 10,
                feature: 3,
                value: 0.4,
            });
            entries_b.push(ActivationEntry {
                text_id: format!("b{i:02}"),
                token: 11,
                feature: 3,
                value: 0.4,
            });
        }
        if i % 5 < 3 {
            entries_b.push(ActivationEntry {
                text_id: format!("b{i:02}"),
                token: 12,
                feature: 42,
                value: 2.5,
            });
        }
        // feature 42 touches model A only on prompt tokens, which pooling
        // must ignore
        if i % 7 == 0 {
            entries_a.push(ActivationEntry {
                text_id: format!("a{i:02}"),
                token: 2,
                feature: 42,
                value: 3.0,
            });
        }
    }
    let dump_a = ActivationDump {
        texts: texts("a", n),
        entries: entries_a,
    };
    let dump_b = ActivationDump {
        texts: texts("b", n),
        entries: entries_b,
    };

    let pooled_a = pool_completion(&dump_a);
    let pooled_b = pool_completion(&dump_b);
    let stats = feature_frequency_diff(&pooled_a, &pooled_b)?;
    for s in &stats {
        println!(
            "feature {:>3}: freq_a {:.2} freq_b {:.2} diff {:+.2}",
            s.feature_id, s.freq_a, s.freq_b, s.diff
        );
    }

    let mut candidates = select_candidates(&stats, 2);
    println!(
        "candidates by |diff|: {:?}",
        candidates
            .iter()
            .map(|c| (c.stats.feature_id, c.direction))
            .collect::<Vec<_>>()
    );

    // mock roles for relabeling, summarization, and phrasing
    let mut mock = MockBackend::new();
    mock.register_responder("relabeler", |req, _| {
        Ok(if req.user.contains("Feature: 42") {
            "LaTeX-style mathematical notation".to_string()
        } else {
            "connective filler words".to_string()
        })
    });
    mock.register_responder("summarizer", |_req, _| {
        Ok(r#"[{"text": "uses mathematical notation in technical answers", "direction": "B", "features": [42]}]"#.to_string())
    });
    mock.register_responder("rewriter", |_req, _| {
        Ok("Uses mathematical notation in technical answers".to_string())
    });

    let templates = PromptTemplates::builtin();
    for candidate in &mut candidates {
        let positives = vec!["The integral $\\int x^2\\,dx$ evaluates to...".to_string()];
        let negatives = vec!["Plain prose answer without formulas".to_string()];
        relabel_feature(
            &mock,
            &templates,
            "relabeler",
            &mut candidate.stats,
            &positives,
            &negatives,
        )?;
        println!(
            "feature {} relabeled: {:?}",
            candidate.stats.feature_id, candidate.stats.label
        );
    }

    let hypotheses = summarize_to_hypotheses(&mock, &templates, "summarizer", &candidates, 40)?;
    for h in &hypotheses {
        let (adjusted, warning) = adjust_phrasing(&mock, &templates, "rewriter", h)?;
        println!(
            "hypothesis {} [{}] direction {} support {}: {}",
            adjusted.id, adjusted.method, adjusted.direction, adjusted.support, adjusted.text
        );
        if let Some(w) = warning {
            println!("  warning: {w}");
        }
    }
    Ok(())
}

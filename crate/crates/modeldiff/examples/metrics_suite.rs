//! The metric suite over synthetic verdict vectors: frequency, accuracy,
//! vfd and its conflation problem, acceptance, confidence intervals, and
//! autorater scoring.
//!
//! ```bash
//! cargo run -p modeldiff --example metrics_suite
//! ```

use modeldiff::gateway::mock::MockBackend;
use modeldiff::metrics::{
    accuracy, frequency, mean_ci, rate_hypothesis, vfd, RatingDimension,
};
use modeldiff::prompts::PromptTemplates;
use modeldiff::{Direction, Hypothesis, Method};

fn describe(name: &str, values: &[i8]) {
    let f = frequency(values).unwrap();
    let acc = accuracy(values).unwrap();
    let v = vfd(values).unwrap();
    let acc_str = acc.map(|a| format!("{a:.3}")).unwrap_or_else(|| "n/a".into());
    println!("{name:<18} n={:<3} f={f:.3} acc={acc_str} vfd={v:+.3}", values.len());
}

fn main() -> anyhow::Result<()> {
    // the conflation pair: wildly different behavior, identical vfd
    let rare_but_right: Vec<i8> = {
        let mut v = vec![0i8; 10];
        v[0] = 1;
        v
    };
    let common_but_weak: Vec<i8> = [vec![1i8; 11], vec![-1i8; 9]].concat();
    describe("rare-but-right", &rare_but_right);
    describe("common-but-weak", &common_but_weak);
    println!("-> equal vfd despite opposite profiles; filter on f and acc instead\n");

    let mixed: Vec<i8> = vec![1, -1, 0, 1, 0, 0, 1, -1];
    describe("mixed", &mixed);

    // t-distribution confidence intervals over per-hypothesis scores
    let accuracies = [0.98, 0.72, 0.85, 0.91, 0.64, 0.88];
    let ci = mean_ci(&accuracies, 0.95)?;
    println!(
        "\nmean accuracy over {} hypotheses: {:.3} +/- {:.3} (95% t-interval)",
        ci.n,
        ci.mean,
        ci.half_width.unwrap()
    );

    // three mock autoraters score a hypothesis on both dimensions
    let mut mock = MockBackend::new();
    mock.register_responder("rater-1", |_req, _| Ok(r#"{"score": 2}"#.to_string()));
    mock.register_responder("rater-2", |_req, _| Ok(r#"{"score": 3}"#.to_string()));
    mock.register_responder("rater-3", |_req, _| Ok(r#"{"score": 4}"#.to_string()));
    let raters: Vec<String> = (1..=3).map(|i| format!("rater-{i}")).collect();
    let hypothesis = Hypothesis {
        id: "h1".into(),
        text: "Recommends high-risk actions without disclaimers".into(),
        direction: Direction::B,
        method: Method::Sae,
        support: 3,
        majority_fraction: 1.0,
    };
    let templates = PromptTemplates::builtin();
    for dimension in [RatingDimension::Interestingness, RatingDimension::Abstraction] {
        let score = rate_hypothesis(&mock, &templates, &hypothesis, dimension, &raters)?;
        println!(
            "{dimension:?}: per-rater {:?} -> mean {:.2}",
            score.per_rater.iter().map(|(_, s)| *s).collect::<Vec<_>>(),
            score.mean
        );
    }
    Ok(())
}

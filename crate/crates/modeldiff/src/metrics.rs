//! Hypothesis evaluation metrics: frequency, accuracy, vfd, acceptance
//! rate, autorater scores, and t-distribution confidence intervals.
//!
//! Conventions: a verdict value is +1 (applies, correct model), -1
//! (applies, wrong model), or 0 (absent). Frequency is the fraction of
//! nonzero verdicts; accuracy is the fraction of +1 among nonzero verdicts
//! and is undefined (never 0 or 1) when no verdict is nonzero. vfd is the
//! verified frequency difference (n+ - n-)/n = f * (2*acc - 1), which
//! conflates the two.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

use crate::gateway::{complete, Gateway, GatewayError, GenerationConfig};
use crate::hypothesis::Hypothesis;
use crate::judge::Verdict;
use crate::prompts::{PromptTemplates, TemplateError, FORMAT_REPROMPT};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty verdict list")]
    EmptyVerdicts,
    #[error("hypothesis {0} has no verdicts")]
    NoVerdicts(String),
    #[error("empty value list")]
    EmptyValues,
    #[error("confidence level {0} out of (0, 1)")]
    BadLevel(f64),
    #[error("no raters configured")]
    NoRaters,
    #[error("all raters failed for hypothesis {0}")]
    AllRatersFailed(String),
    #[error("unknown rating dimension {0}")]
    UnknownDimension(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Fraction of triplets on which the hypothesized behavior manifests.
pub fn frequency(values: &[i8]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyVerdicts);
    }
    let nonzero = values.iter().filter(|v| **v != 0).count();
    Ok(nonzero as f64 / values.len() as f64)
}

/// Among manifesting triplets, the fraction where the judge picked the
/// hypothesized model. `None` when the behavior never manifests.
pub fn accuracy(values: &[i8]) -> Result<Option<f64>, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyVerdicts);
    }
    let nonzero = values.iter().filter(|v| **v != 0).count();
    if nonzero == 0 {
        return Ok(None);
    }
    let correct = values.iter().filter(|v| **v == 1).count();
    Ok(Some(correct as f64 / nonzero as f64))
}

/// Judge-verified frequency difference: (|{+1}| - |{-1}|) / n.
pub fn vfd(values: &[i8]) -> Result<f64, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyVerdicts);
    }
    let pos = values.iter().filter(|v| **v == 1).count() as f64;
    let neg = values.iter().filter(|v| **v == -1).count() as f64;
    Ok((pos - neg) / values.len() as f64)
}

/// Result of the acceptance check over generation-set verdicts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub rate: f64,
    pub accepted_ids: Vec<String>,
    pub total: usize,
}

/// A hypothesis is accepted when the generation-set judge supports it:
/// the behavior manifests (f > 0) and the majority of manifesting verdicts
/// point the right way (acc > 0.5).
pub fn acceptance(
    hypotheses: &[Hypothesis],
    generation_verdicts: &[Verdict],
) -> Result<AcceptanceReport, MetricsError> {
    let mut by_hypothesis: BTreeMap<&str, Vec<i8>> = BTreeMap::new();
    for v in generation_verdicts {
        by_hypothesis
            .entry(v.hypothesis_id.as_str())
            .or_default()
            .push(v.value);
    }
    let mut accepted_ids = Vec::new();
    for h in hypotheses {
        let values = by_hypothesis
            .get(h.id.as_str())
            .ok_or_else(|| MetricsError::NoVerdicts(h.id.clone()))?;
        let f = frequency(values)?;
        let acc = accuracy(values)?;
        if f > 0.0 && acc.is_some_and(|a| a > 0.5) {
            accepted_ids.push(h.id.clone());
        }
    }
    let rate = if hypotheses.is_empty() {
        0.0
    } else {
        accepted_ids.len() as f64 / hypotheses.len() as f64
    };
    Ok(AcceptanceReport {
        rate,
        accepted_ids,
        total: hypotheses.len(),
    })
}

/// Sample mean with a t-distribution confidence half-width. The half-width
/// is `None` for a single value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: Option<f64>,
    pub n: usize,
}

/// Mean and `level` confidence interval over values, using a t-distribution
/// with n-1 degrees of freedom.
pub fn mean_ci(values: &[f64], level: f64) -> Result<MeanCi, MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyValues);
    }
    if !(0.0..1.0).contains(&level) || level <= 0.0 {
        return Err(MetricsError::BadLevel(level));
    }
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return Ok(MeanCi {
            mean,
            half_width: None,
            n,
        });
    }
    let variance = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    let sd = variance.sqrt();
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .expect("valid t distribution")
        .inverse_cdf((1.0 + level) / 2.0);
    Ok(MeanCi {
        mean,
        half_width: Some(t * sd / (n as f64).sqrt()),
        n,
    })
}

/// Autorater dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingDimension {
    Interestingness,
    Abstraction,
}

impl RatingDimension {
    pub fn system_template(self) -> &'static str {
        match self {
            RatingDimension::Interestingness => "rater_interestingness_system",
            RatingDimension::Abstraction => "rater_abstraction_system",
        }
    }

    pub fn user_template(self) -> &'static str {
        match self {
            RatingDimension::Interestingness => "rater_interestingness_user",
            RatingDimension::Abstraction => "rater_abstraction_user",
        }
    }
}

impl std::str::FromStr for RatingDimension {
    type Err = MetricsError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "interestingness" => Ok(RatingDimension::Interestingness),
            "abstraction" => Ok(RatingDimension::Abstraction),
            other => Err(MetricsError::UnknownDimension(other.to_string())),
        }
    }
}

/// Averaged 1-5 ratings for one hypothesis on one dimension.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RaterScore {
    pub hypothesis_id: String,
    pub dimension: RatingDimension,
    /// (rater model, integer score) for every rater whose output was used.
    pub per_rater: Vec<(String, u8)>,
    pub mean: f64,
    /// (rater model, reason) for raters excluded from the mean.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excluded: Vec<(String, String)>,
}

#[derive(Debug, Deserialize)]
struct RaterOutput {
    score: i64,
}

fn parse_rater_score(text: &str) -> Option<i64> {
    let parsed: RaterOutput = serde_json::from_str(text.trim()).ok()?;
    Some(parsed.score)
}

/// Queries each rater model with the dimension's calibrated prompt and
/// averages the in-scale integer scores. Unparseable raters are reprompted
/// once, then excluded; out-of-scale scores are excluded rather than
/// clamped. Every rater failing is an error.
pub fn rate_hypothesis(
    gateway: &dyn Gateway,
    templates: &PromptTemplates,
    hypothesis: &Hypothesis,
    dimension: RatingDimension,
    raters: &[String],
) -> Result<RaterScore, MetricsError> {
    if raters.is_empty() {
        return Err(MetricsError::NoRaters);
    }
    let system = templates.get(dimension.system_template())?.to_string();
    let user = templates.render(
        dimension.user_template(),
        &[("hypothesis", hypothesis.text.as_str())],
    )?;
    let gen = GenerationConfig::default();

    let mut per_rater = Vec::new();
    let mut excluded = Vec::new();
    for rater in raters {
        let score = match complete(gateway, rater, Some(&system), &user, &gen) {
            Ok(response) => match parse_rater_score(response.text()) {
                Some(score) => Some(score),
                None => {
                    let retry_user = format!("{user}{FORMAT_REPROMPT}");
                    match complete(gateway, rater, Some(&system), &retry_user, &gen) {
                        Ok(second) => parse_rater_score(second.text()),
                        Err(_) => None,
                    }
                }
            },
            Err(_) => None,
        };
        match score {
            Some(s @ 1..=5) => per_rater.push((rater.clone(), s as u8)),
            Some(s) => {
                log::warn!("rater {rater} returned out-of-scale score {s}; excluded");
                excluded.push((rater.clone(), format!("out-of-scale score {s}")));
            }
            None => {
                log::warn!("rater {rater} output unparseable after reprompt; excluded");
                excluded.push((rater.clone(), "unparseable output".into()));
            }
        }
    }
    if per_rater.is_empty() {
        return Err(MetricsError::AllRatersFailed(hypothesis.id.clone()));
    }
    let mean = per_rater.iter().map(|(_, s)| *s as f64).sum::<f64>() / per_rater.len() as f64;
    Ok(RaterScore {
        hypothesis_id: hypothesis.id.clone(),
        dimension,
        per_rater,
        mean,
        excluded,
    })
}

/// The per-hypothesis metric bundle.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HypothesisEval {
    pub hypothesis_id: String,
    /// Held-out verdict count.
    pub n: usize,
    pub f: f64,
    /// `None` when f = 0; report layers render it as "n/a".
    pub acc: Option<f64>,
    pub vfd: f64,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interestingness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abstraction: Option<f64>,
}

/// Assembles the eval bundle for one hypothesis from its held-out verdict
/// values.
pub fn evaluate_hypothesis(
    hypothesis_id: &str,
    heldout_values: &[i8],
    accepted: bool,
    interestingness: Option<f64>,
    abstraction: Option<f64>,
) -> Result<HypothesisEval, MetricsError> {
    Ok(HypothesisEval {
        hypothesis_id: hypothesis_id.to_string(),
        n: heldout_values.len(),
        f: frequency(heldout_values)?,
        acc: accuracy(heldout_values)?,
        vfd: vfd(heldout_values)?,
        accepted,
        interestingness,
        abstraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::MockBackend;
    use crate::hypothesis::{Direction, Method};
    use crate::judge::RawChoice;

    #[test]
    fn frequency_examples() {
        assert_eq!(frequency(&[1, -1, 0, 1]).unwrap(), 0.75);
        assert_eq!(frequency(&[0, 0, 0]).unwrap(), 0.0);
        assert_eq!(frequency(&[1; 7]).unwrap(), 1.0);
        assert!(frequency(&[]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert!((accuracy(&[1, -1, 0, 1]).unwrap().unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(accuracy(&[0, 0]).unwrap(), None);
        assert_eq!(accuracy(&[-1, -1]).unwrap(), Some(0.0));
    }

    #[test]
    fn vfd_conflation_example() {
        // f=0.1, acc=1.0: one correct verdict in ten
        let rare_but_right = [1, 0, 0, 0, 0, 0, 0, 0, 0, 0];
        // f=1.0, acc=0.55: 11 correct, 9 wrong over twenty
        let common_but_weak: Vec<i8> = [vec![1i8; 11], vec![-1i8; 9]].concat();
        assert_eq!(vfd(&rare_but_right).unwrap(), 0.1);
        assert_eq!(vfd(&common_but_weak).unwrap(), 0.1);
        assert_eq!(vfd(&[0, 0, 0]).unwrap(), 0.0);
    }

    #[test]
    fn vfd_equals_f_times_signed_accuracy() {
        use rand::{Rng, SeedableRng};
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=200);
            let values: Vec<i8> = (0..n).map(|_| [-1, 0, 1][rng.gen_range(0..3)]).collect();
            let f = frequency(&values).unwrap();
            let v = vfd(&values).unwrap();
            if let Some(acc) = accuracy(&values).unwrap() {
                assert!((v - f * (2.0 * acc - 1.0)).abs() <= 1e-12);
            } else {
                assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn negating_verdicts_flips_vfd_and_acc() {
        let values: Vec<i8> = vec![1, 1, -1, 0, 1, 0, -1];
        let negated: Vec<i8> = values.iter().map(|v| -v).collect();
        assert_eq!(frequency(&values).unwrap(), frequency(&negated).unwrap());
        assert_eq!(vfd(&values).unwrap(), -vfd(&negated).unwrap());
        let acc = accuracy(&values).unwrap().unwrap();
        let acc_neg = accuracy(&negated).unwrap().unwrap();
        assert!((acc - (1.0 - acc_neg)).abs() < 1e-15);
    }

    fn hypothesis(id: &str) -> Hypothesis {
        Hypothesis {
            id: id.into(),
            text: "Uses tables to present structured information".into(),
            direction: Direction::B,
            method: Method::Llm,
            support: 4,
            majority_fraction: 1.0,
        }
    }

    fn verdicts(id: &str, values: &[i8]) -> Vec<Verdict> {
        values
            .iter()
            .enumerate()
            .map(|(i, &value)| Verdict {
                hypothesis_id: id.into(),
                triplet_id: format!("t{i}"),
                value,
                raw_choice: RawChoice::Na,
                swapped: false,
            })
            .collect()
    }

    #[test]
    fn acceptance_counts_and_filters() {
        let hypotheses = vec![
            hypothesis("h1"),
            hypothesis("h2"),
            hypothesis("h3"),
            hypothesis("h4"),
        ];
        let mut all = Vec::new();
        all.extend(verdicts("h1", &[1, 1, 0]));
        all.extend(verdicts("h2", &[1, -1, 1]));
        all.extend(verdicts("h3", &[-1, -1, 1])); // acc = 1/3, rejected
        all.extend(verdicts("h4", &[1, 0, 0]));
        let report = acceptance(&hypotheses, &all).unwrap();
        assert_eq!(report.rate, 0.75);
        assert_eq!(report.accepted_ids, vec!["h1", "h2", "h4"]);
    }

    #[test]
    fn all_zero_verdicts_reject() {
        let hypotheses = vec![hypothesis("h1")];
        let all = verdicts("h1", &[0, 0, 0]);
        let report = acceptance(&hypotheses, &all).unwrap();
        assert!(report.accepted_ids.is_empty());
    }

    #[test]
    fn missing_verdicts_error() {
        let hypotheses = vec![hypothesis("h1")];
        assert!(matches!(
            acceptance(&hypotheses, &[]),
            Err(MetricsError::NoVerdicts(id)) if id == "h1"
        ));
    }

    #[test]
    fn ci_matches_t_table() {
        let ci = mean_ci(&[0.0, 1.0], 0.95).unwrap();
        assert!((ci.mean - 0.5).abs() < 1e-15);
        // t_{0.975,1} = 12.706, s = 0.7071 -> half-width 6.353102368216047
        assert!((ci.half_width.unwrap() - 6.353102368216047).abs() < 1e-3);
    }

    #[test]
    fn ci_degenerate_cases() {
        let constant = mean_ci(&[2.0; 6], 0.95).unwrap();
        assert_eq!(constant.half_width, Some(0.0));
        let single = mean_ci(&[3.5], 0.95).unwrap();
        assert_eq!(single.mean, 3.5);
        assert_eq!(single.half_width, None);
        assert!(mean_ci(&[], 0.95).is_err());
    }

    #[test]
    fn ci_width_shrinks_with_n() {
        // duplicated data at n=4 and n=16, checked against hand-computed
        // t-table values
        let four = [0.0, 1.0, 0.0, 1.0];
        let sixteen: Vec<f64> = four.iter().cycle().take(16).copied().collect();
        let hw4 = mean_ci(&four, 0.95).unwrap().half_width.unwrap();
        let hw16 = mean_ci(&sixteen, 0.95).unwrap().half_width.unwrap();
        assert!((hw4 - 0.9186931155186995).abs() < 1e-9);
        assert!((hw16 - 0.27516895310775413).abs() < 1e-9);
        // roughly 1/sqrt(n): quadrupling n cuts the width by ~sqrt(4),
        // modulo the t quantile and the n-1 variance denominator
        let ratio = hw4 / hw16;
        assert!(ratio > 2.0 && ratio < 4.5, "ratio {ratio}");
    }

    fn rater_mock(scores: &[(&str, &str)]) -> MockBackend {
        let mut mock = MockBackend::new();
        for (model, response) in scores {
            let response = response.to_string();
            mock.register_responder(model, move |_req, _| Ok(response.clone()));
        }
        mock
    }

    #[test]
    fn rating_averages_three_raters() {
        let templates = PromptTemplates::builtin();
        let mock = rater_mock(&[
            ("r1", r#"{"score": 2, "rationale": "x", "signals": {}}"#),
            ("r2", r#"{"score": 3, "rationale": "x", "signals": {}}"#),
            ("r3", r#"{"score": 4, "rationale": "x", "signals": {}}"#),
        ]);
        let raters = vec!["r1".to_string(), "r2".to_string(), "r3".to_string()];
        let score = rate_hypothesis(
            &mock,
            &templates,
            &hypothesis("h1"),
            RatingDimension::Interestingness,
            &raters,
        )
        .unwrap();
        assert_eq!(score.mean, 3.0);
        assert_eq!(score.per_rater.len(), 3);
    }

    #[test]
    fn rating_floor() {
        let templates = PromptTemplates::builtin();
        let mock = rater_mock(&[
            ("r1", r#"{"score": 1}"#),
            ("r2", r#"{"score": 1}"#),
            ("r3", r#"{"score": 1}"#),
        ]);
        let raters = vec!["r1".to_string(), "r2".to_string(), "r3".to_string()];
        let score = rate_hypothesis(
            &mock,
            &templates,
            &hypothesis("h1"),
            RatingDimension::Abstraction,
            &raters,
        )
        .unwrap();
        assert_eq!(score.mean, 1.0);
    }

    #[test]
    fn out_of_scale_rater_is_excluded() {
        let templates = PromptTemplates::builtin();
        let mock = rater_mock(&[
            ("r1", r#"{"score": 7}"#),
            ("r2", r#"{"score": 3}"#),
            ("r3", r#"{"score": 5}"#),
        ]);
        let raters = vec!["r1".to_string(), "r2".to_string(), "r3".to_string()];
        let score = rate_hypothesis(
            &mock,
            &templates,
            &hypothesis("h1"),
            RatingDimension::Interestingness,
            &raters,
        )
        .unwrap();
        assert_eq!(score.mean, 4.0);
        assert_eq!(score.excluded.len(), 1);
        assert_eq!(score.excluded[0].0, "r1");
    }

    #[test]
    fn all_raters_failing_is_an_error() {
        let templates = PromptTemplates::builtin();
        let mock = rater_mock(&[("r1", "not json at all")]);
        let raters = vec!["r1".to_string()];
        assert!(matches!(
            rate_hypothesis(
                &mock,
                &templates,
                &hypothesis("h1"),
                RatingDimension::Interestingness,
                &raters,
            ),
            Err(MetricsError::AllRatersFailed(_))
        ));
    }

    #[test]
    fn eval_bundle_keeps_identity() {
        let eval = evaluate_hypothesis("h1", &[1, -1, 0, 1], true, Some(3.0), None).unwrap();
        assert_eq!(eval.n, 4);
        assert_eq!(eval.f, 0.75);
        let acc = eval.acc.unwrap();
        assert!((eval.vfd - eval.f * (2.0 * acc - 1.0)).abs() <= 1e-12);
    }
}

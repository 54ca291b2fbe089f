//! The comparative, position-debiased judge.
//!
//! A batch of up to 10 hypotheses is shown alongside one triplet. The two
//! responses are presented in randomly swapped order (seeded, 50%
//! probability) and the judge answers 1, 2, or "N/A" per hypothesis without
//! knowing which model each hypothesis points at. The swap is reverted when
//! mapping answers to verdicts in {-1, 0, +1}.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Triplet;
use crate::gateway::{complete, Gateway, GatewayError, GenerationConfig};
use crate::hypothesis::{Direction, Hypothesis};
use crate::prompts::{PromptTemplates, TemplateError, FORMAT_REPROMPT};

/// Largest number of hypotheses the judge sees at once.
pub const MAX_BATCH: usize = 10;

#[derive(Debug, Error)]
pub enum JudgeError {
    #[error("batch size {0} out of range [1, 10]")]
    BatchSize(usize),
    #[error("parse error: {message} in judge output: {raw}")]
    Parse { message: String, raw: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// The judge's literal answer for one hypothesis label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RawChoice {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "NA")]
    Na,
}

/// The judge outcome for one (hypothesis, triplet) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub hypothesis_id: String,
    pub triplet_id: String,
    /// +1 correct direction, -1 wrong direction, 0 behavior absent.
    pub value: i8,
    pub raw_choice: RawChoice,
    pub swapped: bool,
}

/// A hypothesis label the judge failed to answer after the reprompt. Kept
/// distinct from a 0 verdict so metric denominators stay honest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeFailure {
    pub hypothesis_id: String,
    pub triplet_id: String,
    pub error: String,
}

/// Verdicts plus any per-label failures for one judged batch.
#[derive(Debug, Clone, Default)]
pub struct BatchOutcome {
    pub verdicts: Vec<Verdict>,
    pub failures: Vec<JudgeFailure>,
}

/// Strictly parses the judge's reply: a single JSON object, keys drawn from
/// H1..Hn, values 1, 2, or "N/A" (numerals as strings are coerced). Extra
/// keys, markdown fences, or prose are errors; `expected_labels` lets the
/// caller detect missing labels.
pub fn parse_judge_output(
    text: &str,
    n_labels: usize,
) -> Result<BTreeMap<String, RawChoice>, JudgeError> {
    let map = parse_judge_map(text, n_labels)?;
    for i in 1..=n_labels {
        let label = format!("H{i}");
        if !map.contains_key(&label) {
            return Err(JudgeError::Parse {
                message: format!("missing {label}"),
                raw: text.to_string(),
            });
        }
    }
    Ok(map)
}

/// Like [`parse_judge_output`] but without the completeness check, used to
/// salvage partial answers after a failed reprompt.
fn parse_judge_map(text: &str, n_labels: usize) -> Result<BTreeMap<String, RawChoice>, JudgeError> {
    let parse_err = |message: String| JudgeError::Parse {
        message,
        raw: text.to_string(),
    };
    let value: serde_json::Value = serde_json::from_str(text.trim())
        .map_err(|e| parse_err(format!("not a JSON object: {e}")))?;
    let object = value
        .as_object()
        .ok_or_else(|| parse_err("top-level value is not an object".into()))?;

    let allowed: Vec<String> = (1..=n_labels).map(|i| format!("H{i}")).collect();
    let mut map = BTreeMap::new();
    for (key, val) in object {
        if !allowed.contains(key) {
            return Err(parse_err(format!("unexpected key {key:?}")));
        }
        let choice = match val {
            serde_json::Value::Number(n) => match n.as_i64() {
                Some(1) => RawChoice::One,
                Some(2) => RawChoice::Two,
                other => {
                    return Err(parse_err(format!(
                        "parse error for {key}: value {other:?} not in {{1, 2, \"N/A\"}}"
                    )))
                }
            },
            serde_json::Value::String(s) => match s.trim() {
                "1" => RawChoice::One,
                "2" => RawChoice::Two,
                "N/A" => RawChoice::Na,
                other => {
                    return Err(parse_err(format!(
                        "parse error for {key}: value {other:?} not in {{1, 2, \"N/A\"}}"
                    )))
                }
            },
            other => {
                return Err(parse_err(format!(
                    "parse error for {key}: value {other} not in {{1, 2, \"N/A\"}}"
                )))
            }
        };
        map.insert(key.clone(), choice);
    }
    Ok(map)
}

/// Maps a raw answer through the swap to a signed verdict: the displayed
/// response index resolves to a concrete model, +1 when it matches the
/// hypothesis direction, -1 otherwise, 0 for "N/A".
pub fn resolve_verdict(raw_choice: RawChoice, swapped: bool, direction: Direction) -> i8 {
    let chosen = match raw_choice {
        RawChoice::Na => return 0,
        RawChoice::One => {
            if swapped {
                Direction::B
            } else {
                Direction::A
            }
        }
        RawChoice::Two => {
            if swapped {
                Direction::A
            } else {
                Direction::B
            }
        }
    };
    if chosen == direction {
        1
    } else {
        -1
    }
}

/// Whether a seeded judge request presents the responses swapped.
pub fn swap_decision(seed: u64) -> bool {
    ChaCha8Rng::seed_from_u64(seed).gen_bool(0.5)
}

fn hypothesis_listing(hypotheses: &[Hypothesis]) -> String {
    hypotheses
        .iter()
        .enumerate()
        .map(|(i, h)| format!("H{}: {}", i + 1, h.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Judges a batch of hypotheses against one triplet. The response order is
/// swapped with 50% probability drawn from `seed`; unparseable output is
/// reprompted once and any still-missing labels become failures rather
/// than verdicts.
pub fn judge_batch(
    gateway: &dyn Gateway,
    templates: &PromptTemplates,
    judge_model: &str,
    hypotheses: &[Hypothesis],
    triplet: &Triplet,
    seed: u64,
) -> Result<BatchOutcome, JudgeError> {
    if hypotheses.is_empty() || hypotheses.len() > MAX_BATCH {
        return Err(JudgeError::BatchSize(hypotheses.len()));
    }
    let swapped = swap_decision(seed);
    let (response1, response2) = if swapped {
        (&triplet.response_b, &triplet.response_a)
    } else {
        (&triplet.response_a, &triplet.response_b)
    };
    let listing = hypothesis_listing(hypotheses);
    let system = templates.get("judge_system")?.to_string();
    let user = templates.render(
        "judge_user",
        &[
            ("hypotheses", listing.as_str()),
            ("prompt", triplet.prompt.as_str()),
            ("response1", response1.as_str()),
            ("response2", response2.as_str()),
        ],
    )?;
    let gen = GenerationConfig::default();

    let first = complete(gateway, judge_model, Some(&system), &user, &gen)?;
    let (map, parse_failure) = match parse_judge_output(first.text(), hypotheses.len()) {
        Ok(map) => (map, None),
        Err(first_err) => {
            let retry_user = format!("{user}{FORMAT_REPROMPT}");
            let second = complete(gateway, judge_model, Some(&system), &retry_user, &gen)?;
            match parse_judge_output(second.text(), hypotheses.len()) {
                Ok(map) => (map, None),
                // salvage whatever labels parsed; the rest become failures
                Err(second_err) => match parse_judge_map(second.text(), hypotheses.len()) {
                    Ok(partial) => (partial, Some(second_err.to_string())),
                    Err(_) => (BTreeMap::new(), Some(format!("{first_err}; {second_err}"))),
                },
            }
        }
    };

    let mut outcome = BatchOutcome::default();
    for (i, hypothesis) in hypotheses.iter().enumerate() {
        let label = format!("H{}", i + 1);
        match map.get(&label) {
            Some(&raw_choice) => outcome.verdicts.push(Verdict {
                hypothesis_id: hypothesis.id.clone(),
                triplet_id: triplet.prompt_id.clone(),
                value: resolve_verdict(raw_choice, swapped, hypothesis.direction),
                raw_choice,
                swapped,
            }),
            None => outcome.failures.push(JudgeFailure {
                hypothesis_id: hypothesis.id.clone(),
                triplet_id: triplet.prompt_id.clone(),
                error: parse_failure
                    .clone()
                    .unwrap_or_else(|| format!("missing {label}")),
            }),
        }
    }
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::MockBackend;
    use crate::hypothesis::Method;

    fn hypothesis(id: &str, direction: Direction) -> Hypothesis {
        Hypothesis {
            id: id.into(),
            text: "Provides short answers".into(),
            direction,
            method: Method::Llm,
            support: 5,
            majority_fraction: 1.0,
        }
    }

    fn triplet() -> Triplet {
        Triplet {
            prompt_id: "t1".into(),
            prompt: "p".into(),
            response_a: "ra".into(),
            response_b: "rb".into(),
            model_a: "ma".into(),
            model_b: "mb".into(),
        }
    }

    #[test]
    fn parses_the_listing_shape() {
        let map = parse_judge_output(r#"{"H1": 2, "H2": "N/A"}"#, 2).unwrap();
        assert_eq!(map["H1"], RawChoice::Two);
        assert_eq!(map["H2"], RawChoice::Na);
    }

    #[test]
    fn empty_object_reports_missing_label() {
        let err = parse_judge_output("{}", 1).unwrap_err();
        assert!(err.to_string().contains("missing H1"), "{err}");
    }

    #[test]
    fn numeral_strings_coerce() {
        let map = parse_judge_output(r#"{"H1": "1"}"#, 1).unwrap();
        assert_eq!(map["H1"], RawChoice::One);
    }

    #[test]
    fn out_of_alphabet_value_is_a_parse_error() {
        let err = parse_judge_output(r#"{"H1": 3}"#, 1).unwrap_err();
        assert!(err.to_string().contains("H1"), "{err}");
    }

    #[test]
    fn fences_and_extra_keys_are_rejected() {
        assert!(parse_judge_output("```json\n{\"H1\": 1}\n```", 1).is_err());
        assert!(parse_judge_output(r#"{"H1": 1, "note": "hi"}"#, 1).is_err());
        assert!(parse_judge_output(r#"Sure! {"H1": 1}"#, 1).is_err());
    }

    #[test]
    fn verdict_resolution_examples() {
        assert_eq!(resolve_verdict(RawChoice::One, false, Direction::A), 1);
        assert_eq!(resolve_verdict(RawChoice::One, true, Direction::A), -1);
        assert_eq!(resolve_verdict(RawChoice::Na, true, Direction::B), 0);
        assert_eq!(resolve_verdict(RawChoice::Two, false, Direction::B), 1);
        assert_eq!(resolve_verdict(RawChoice::Two, true, Direction::B), -1);
    }

    #[test]
    fn verdict_negates_under_swap() {
        for raw in [RawChoice::One, RawChoice::Two] {
            for direction in [Direction::A, Direction::B] {
                assert_eq!(
                    resolve_verdict(raw, false, direction),
                    -resolve_verdict(raw, true, direction)
                );
            }
        }
    }

    #[test]
    fn batch_maps_answers_to_verdicts() {
        let templates = PromptTemplates::builtin();
        let mut mock = MockBackend::new();
        mock.register_responder("judge", |_req, _| {
            Ok(r#"{"H1": 1, "H2": "N/A"}"#.to_string())
        });
        let hypotheses = vec![hypothesis("h1", Direction::A), hypothesis("h2", Direction::A)];
        // find a seed with swapped=false for a stable expectation
        let seed = (0..100).find(|&s| !swap_decision(s)).unwrap();
        let outcome =
            judge_batch(&mock, &templates, "judge", &hypotheses, &triplet(), seed).unwrap();
        assert_eq!(outcome.verdicts.len(), 2);
        assert_eq!(outcome.verdicts[0].value, 1);
        assert_eq!(outcome.verdicts[1].value, 0);
        assert!(outcome.failures.is_empty());
    }

    #[test]
    fn batch_resolves_swap() {
        let templates = PromptTemplates::builtin();
        let mut mock = MockBackend::new();
        mock.register_responder("judge", |_req, _| Ok(r#"{"H1": 1}"#.to_string()));
        let hypotheses = vec![hypothesis("h1", Direction::A)];
        let seed = (0..100).find(|&s| swap_decision(s)).unwrap();
        let outcome =
            judge_batch(&mock, &templates, "judge", &hypotheses, &triplet(), seed).unwrap();
        // displayed response 1 is r^B under the swap
        assert_eq!(outcome.verdicts[0].value, -1);
        assert!(outcome.verdicts[0].swapped);
    }

    #[test]
    fn batch_size_limits() {
        let templates = PromptTemplates::builtin();
        let mock = MockBackend::new();
        let too_many: Vec<Hypothesis> = (0..11)
            .map(|i| hypothesis(&format!("h{i}"), Direction::A))
            .collect();
        assert!(matches!(
            judge_batch(&mock, &templates, "judge", &too_many, &triplet(), 0),
            Err(JudgeError::BatchSize(11))
        ));
        assert!(matches!(
            judge_batch(&mock, &templates, "judge", &[], &triplet(), 0),
            Err(JudgeError::BatchSize(0))
        ));
    }

    #[test]
    fn unanswered_labels_become_failures() {
        let templates = PromptTemplates::builtin();
        let mut mock = MockBackend::new();
        // answers only H1 on both attempts
        mock.register_responder("judge", |_req, _| Ok(r#"{"H1": 2}"#.to_string()));
        let hypotheses = vec![hypothesis("h1", Direction::B), hypothesis("h2", Direction::A)];
        let outcome =
            judge_batch(&mock, &templates, "judge", &hypotheses, &triplet(), 3).unwrap();
        assert_eq!(outcome.verdicts.len(), 1);
        assert_eq!(outcome.verdicts[0].hypothesis_id, "h1");
        assert_eq!(outcome.failures.len(), 1);
        assert_eq!(outcome.failures[0].hypothesis_id, "h2");
    }

    #[test]
    fn position_biased_judge_debiases_to_half() {
        // A judge that always answers "1" must resolve to +1 about half the
        // time across seeds; the other half the swap makes it -1.
        let templates = PromptTemplates::builtin();
        let mut mock = MockBackend::new();
        mock.register_responder("judge", |_req, _| Ok(r#"{"H1": 1}"#.to_string()));
        let hypotheses = vec![hypothesis("h1", Direction::A)];
        let t = triplet();
        let trials = 500;
        let mut correct = 0;
        for seed in 0..trials {
            let outcome =
                judge_batch(&mock, &templates, "judge", &hypotheses, &t, seed).unwrap();
            if outcome.verdicts[0].value == 1 {
                correct += 1;
            }
        }
        let rate = correct as f64 / trials as f64;
        assert!((0.42..=0.58).contains(&rate), "rate {rate}");
    }
}

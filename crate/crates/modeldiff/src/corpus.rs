//! Prompt loading, paired response collection, and generation/held-out
//! splitting.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{complete_batch, ChatRequest, Gateway, GatewayError, GenerationConfig};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: duplicate id {id}")]
    DuplicateId { line: usize, id: String },
    #[error("need {required}, have {available}")]
    InsufficientTriplets { required: usize, available: usize },
    #[error("models must differ, both are {0}")]
    IdenticalModels(String),
    #[error("collection failed for all {0} prompts")]
    CollectionFailed(usize),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// One prompt to pose to both models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

/// One prompt with the paired responses from the two compared models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub prompt_id: String,
    pub prompt: String,
    pub response_a: String,
    pub response_b: String,
    pub model_a: String,
    pub model_b: String,
}

/// Disjoint generation and held-out triplet sets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSplit {
    pub generation: Vec<Triplet>,
    pub heldout: Vec<Triplet>,
    pub seed: u64,
}

/// A prompt dropped during collection, with the reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SkippedPrompt {
    pub prompt_id: String,
    pub error: String,
}

/// The result of collecting paired responses: per-prompt failures are
/// recorded rather than fatal.
#[derive(Debug, Clone)]
pub struct CollectOutcome {
    pub triplets: Vec<Triplet>,
    pub skipped: Vec<SkippedPrompt>,
}

/// Reads up to `limit` prompt records from a line-delimited JSON file.
/// Malformed lines and duplicate ids are errors naming the offending line.
pub fn load_prompts(path: &Path, limit: Option<usize>) -> Result<Vec<PromptRecord>, CorpusError> {
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, line) in reader.lines().enumerate() {
        if limit.is_some_and(|l| records.len() >= l) {
            break;
        }
        let line_no = idx + 1;
        let line = line.map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PromptRecord =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                line: line_no,
                message: prettify_serde_error(&e),
            })?;
        if record.id.is_empty() {
            return Err(CorpusError::MalformedLine {
                line: line_no,
                message: "empty id".into(),
            });
        }
        if record.text.is_empty() {
            return Err(CorpusError::MalformedLine {
                line: line_no,
                message: "empty text".into(),
            });
        }
        if !seen.insert(record.id.clone()) {
            return Err(CorpusError::DuplicateId {
                line: line_no,
                id: record.id,
            });
        }
        records.push(record);
    }
    Ok(records)
}

fn prettify_serde_error(e: &serde_json::Error) -> String {
    // "missing field `text` at line 1 column 20" -> "missing field text"
    let message = e.to_string();
    if let Some(rest) = message.strip_prefix("missing field `") {
        if let Some(field) = rest.split('`').next() {
            return format!("missing field {field}");
        }
    }
    message
}

/// Collects one response from each model per prompt through the gateway,
/// issuing calls for distinct prompts concurrently up to `parallelism`.
/// Output order matches input order; prompts whose calls fail after the
/// gateway's retries are skipped and recorded.
pub fn collect_pairs(
    gateway: &dyn Gateway,
    prompts: &[PromptRecord],
    model_a: &str,
    model_b: &str,
    gen: &GenerationConfig,
    parallelism: usize,
) -> Result<CollectOutcome, CorpusError> {
    if model_a == model_b {
        return Err(CorpusError::IdenticalModels(model_a.to_string()));
    }
    gen.validate()?;

    // Interleaved request list: 2i for model A, 2i+1 for model B.
    let requests: Vec<ChatRequest> = prompts
        .iter()
        .flat_map(|p| {
            [
                ChatRequest::new(model_a, p.text.clone(), gen.clone()),
                ChatRequest::new(model_b, p.text.clone(), gen.clone()),
            ]
        })
        .collect();
    let results = complete_batch(gateway, &requests, parallelism)?;

    let mut triplets = Vec::new();
    let mut skipped = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let pair = (&results[2 * i], &results[2 * i + 1]);
        match pair {
            (Ok(a), Ok(b)) => triplets.push(Triplet {
                prompt_id: prompt.id.clone(),
                prompt: prompt.text.clone(),
                response_a: a.text().to_string(),
                response_b: b.text().to_string(),
                model_a: model_a.to_string(),
                model_b: model_b.to_string(),
            }),
            (Err(e), _) => {
                log::warn!("prompt {}: model {model_a} failed: {e}", prompt.id);
                skipped.push(SkippedPrompt {
                    prompt_id: prompt.id.clone(),
                    error: format!("{model_a}: {e}"),
                });
            }
            (_, Err(e)) => {
                log::warn!("prompt {}: model {model_b} failed: {e}", prompt.id);
                skipped.push(SkippedPrompt {
                    prompt_id: prompt.id.clone(),
                    error: format!("{model_b}: {e}"),
                });
            }
        }
    }
    if !prompts.is_empty() && triplets.is_empty() {
        return Err(CorpusError::CollectionFailed(prompts.len()));
    }
    Ok(CollectOutcome { triplets, skipped })
}

/// Splits triplets into disjoint generation and held-out sets. The split is
/// a pure function of the prompt-id set, the requested sizes, and the seed:
/// triplets are ordered by prompt id before the seeded shuffle, so input
/// order never matters.
pub fn split_corpus(
    triplets: Vec<Triplet>,
    n_generation: usize,
    n_heldout: usize,
    seed: u64,
) -> Result<CorpusSplit, CorpusError> {
    let required = n_generation + n_heldout;
    if required > triplets.len() {
        return Err(CorpusError::InsufficientTriplets {
            required,
            available: triplets.len(),
        });
    }
    let mut ordered = triplets;
    ordered.sort_by(|a, b| a.prompt_id.cmp(&b.prompt_id));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ordered.shuffle(&mut rng);
    let heldout = ordered.split_off(n_generation).into_iter().take(n_heldout).collect();
    Ok(CorpusSplit {
        generation: ordered,
        heldout,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::mock::MockBackend;

    fn write_prompts(lines: &[&str]) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        (dir, path)
    }

    fn triplet(id: &str) -> Triplet {
        Triplet {
            prompt_id: id.into(),
            prompt: format!("p-{id}"),
            response_a: "ra".into(),
            response_b: "rb".into(),
            model_a: "a".into(),
            model_b: "b".into(),
        }
    }

    #[test]
    fn load_respects_limit_and_order() {
        let (_dir, path) = write_prompts(&[
            r#"{"id":"p1","text":"one"}"#,
            r#"{"id":"p2","text":"two"}"#,
            r#"{"id":"p3","text":"three"}"#,
        ]);
        let records = load_prompts(&path, Some(2)).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].id, "p1");
        assert_eq!(records[1].id, "p2");
    }

    #[test]
    fn load_empty_file_is_empty() {
        let (_dir, path) = write_prompts(&[]);
        assert!(load_prompts(&path, None).unwrap().is_empty());
    }

    #[test]
    fn load_names_line_for_missing_field() {
        let mut lines = vec![r#"{"id":"p1","text":"one"}"#; 6];
        lines.push(r#"{"id":"p7"}"#);
        let (_dir, path) = write_prompts(&lines);
        // duplicates of p1 error first; rebuild with unique ids
        let lines: Vec<String> = (1..=6)
            .map(|i| format!(r#"{{"id":"p{i}","text":"t{i}"}}"#))
            .chain(std::iter::once(r#"{"id":"p7"}"#.to_string()))
            .collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let (_dir2, path2) = write_prompts(&refs);
        drop(path);
        let err = load_prompts(&path2, None).unwrap_err();
        assert_eq!(err.to_string(), "line 7: missing field text");
    }

    #[test]
    fn load_rejects_duplicate_ids() {
        let (_dir, path) = write_prompts(&[
            r#"{"id":"p1","text":"one"}"#,
            r#"{"id":"p1","text":"again"}"#,
        ]);
        let err = load_prompts(&path, None).unwrap_err();
        assert!(err.to_string().contains("duplicate id p1"), "{err}");
    }

    #[test]
    fn collect_echo_pair() {
        let mut mock = MockBackend::new();
        mock.script_text("echo-a", "one", "A:one");
        mock.script_text("echo-b", "one", "B:one");
        mock.script_text("echo-a", "two", "A:two");
        mock.script_text("echo-b", "two", "B:two");
        let prompts = vec![
            PromptRecord {
                id: "p1".into(),
                text: "one".into(),
                meta: BTreeMap::new(),
            },
            PromptRecord {
                id: "p2".into(),
                text: "two".into(),
                meta: BTreeMap::new(),
            },
        ];
        let outcome = collect_pairs(
            &mock,
            &prompts,
            "echo-a",
            "echo-b",
            &GenerationConfig::default(),
            2,
        )
        .unwrap();
        assert_eq!(outcome.triplets.len(), 2);
        assert_eq!(outcome.triplets[0].response_a, "A:one");
        assert_eq!(outcome.triplets[1].response_b, "B:two");
        assert!(outcome.skipped.is_empty());
    }

    #[test]
    fn collect_skips_failed_prompt() {
        let mut mock = MockBackend::new();
        mock.script_text("echo-a", "one", "A:one");
        mock.script_text("echo-b", "one", "B:one");
        // "two" deliberately unscripted for echo-a
        mock.script_text("echo-b", "two", "B:two");
        let prompts = vec![
            PromptRecord {
                id: "p1".into(),
                text: "one".into(),
                meta: BTreeMap::new(),
            },
            PromptRecord {
                id: "p2".into(),
                text: "two".into(),
                meta: BTreeMap::new(),
            },
        ];
        let outcome = collect_pairs(
            &mock,
            &prompts,
            "echo-a",
            "echo-b",
            &GenerationConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(outcome.triplets.len(), 1);
        assert_eq!(outcome.skipped.len(), 1);
        assert_eq!(outcome.skipped[0].prompt_id, "p2");
    }

    #[test]
    fn collect_fails_when_every_prompt_fails() {
        let mut mock = MockBackend::new();
        mock.script_text("echo-a", "unrelated", "x");
        let prompts = vec![PromptRecord {
            id: "p1".into(),
            text: "one".into(),
            meta: BTreeMap::new(),
        }];
        let err = collect_pairs(
            &mock,
            &prompts,
            "echo-a",
            "echo-b",
            &GenerationConfig::default(),
            1,
        )
        .unwrap_err();
        assert!(matches!(err, CorpusError::CollectionFailed(1)));
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let triplets: Vec<Triplet> = (0..1500).map(|i| triplet(&format!("p{i:04}"))).collect();
        let a = split_corpus(triplets.clone(), 1000, 500, 7).unwrap();
        let b = split_corpus(triplets, 1000, 500, 7).unwrap();
        assert_eq!(a.generation.len(), 1000);
        assert_eq!(a.heldout.len(), 500);
        let gen_ids: BTreeSet<_> = a.generation.iter().map(|t| &t.prompt_id).collect();
        let held_ids: BTreeSet<_> = a.heldout.iter().map(|t| &t.prompt_id).collect();
        assert!(gen_ids.is_disjoint(&held_ids));
        assert_eq!(
            a.generation.iter().map(|t| &t.prompt_id).collect::<Vec<_>>(),
            b.generation.iter().map(|t| &t.prompt_id).collect::<Vec<_>>()
        );
    }

    #[test]
    fn split_ignores_input_order() {
        let triplets: Vec<Triplet> = (0..30).map(|i| triplet(&format!("p{i:02}"))).collect();
        let mut reversed = triplets.clone();
        reversed.reverse();
        let a = split_corpus(triplets, 20, 10, 3).unwrap();
        let b = split_corpus(reversed, 20, 10, 3).unwrap();
        assert_eq!(
            a.generation.iter().map(|t| &t.prompt_id).collect::<Vec<_>>(),
            b.generation.iter().map(|t| &t.prompt_id).collect::<Vec<_>>()
        );
    }

    #[test]
    fn split_zero_generation_is_degenerate() {
        let triplets: Vec<Triplet> = (0..10).map(|i| triplet(&format!("p{i}"))).collect();
        let split = split_corpus(triplets, 0, 4, 1).unwrap();
        assert!(split.generation.is_empty());
        assert_eq!(split.heldout.len(), 4);
    }

    #[test]
    fn split_insufficient_is_an_error() {
        let triplets: Vec<Triplet> = (0..10).map(|i| triplet(&format!("p{i}"))).collect();
        let err = split_corpus(triplets, 8, 5, 1).unwrap_err();
        assert_eq!(err.to_string(), "need 13, have 10");
    }
}

//! The SAE-based diffing pipeline over ingested activation dumps:
//! completion-token max-pooling, per-feature activation-frequency
//! differencing, candidate selection, relabeling, summarization into
//! hypotheses, and phrasing adjustment.
//!
//! The reader model and its sparse autoencoder run out of process; this
//! module only consumes their dumps. A feature "activates" on a text when
//! its pooled value exceeds zero.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{complete, Gateway, GatewayError, GenerationConfig};
use crate::hypothesis::{Direction, Hypothesis, Method};
use crate::prompts::{PromptTemplates, TemplateError, FORMAT_REPROMPT};

#[derive(Debug, Error)]
pub enum SaeError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("line {line}: negative activation {value} for feature {feature}")]
    NegativeActivation {
        line: usize,
        feature: u64,
        value: f64,
    },
    #[error("line {line}: token index {token} out of range for text {text_id} ({total} tokens)")]
    TokenOutOfRange {
        line: usize,
        token: usize,
        text_id: String,
        total: usize,
    },
    #[error("line {line}: unknown text id {text_id}")]
    UnknownTextId { line: usize, text_id: String },
    #[error("text {text_id}: completion_start {start} exceeds total_tokens {total}")]
    BadCompletionStart {
        text_id: String,
        start: usize,
        total: usize,
    },
    #[error("duplicate text id {0}")]
    DuplicateTextId(String),
    #[error("side {0} has zero texts")]
    ZeroTexts(&'static str),
    #[error("no positive examples for feature {0}")]
    NoPositives(u64),
    #[error("summarizer output unparseable: {raw}")]
    BadSummary { raw: String },
    #[error("hypothesis merges features with conflicting directions: {raw}")]
    ConflictingDirections { raw: String },
    #[error("summarizer referenced unknown feature {0}")]
    UnknownFeature(u64),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Metadata for one text in an activation dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextMeta {
    pub text_id: String,
    /// First token index of the completion region; pooling only looks at
    /// indices >= this.
    pub completion_start: usize,
    pub total_tokens: usize,
}

/// One sparse activation entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationEntry {
    pub text_id: String,
    pub token: usize,
    pub feature: u64,
    pub value: f64,
}

/// A validated sparse activation dump for one model's responses.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    pub texts: Vec<TextMeta>,
    pub entries: Vec<ActivationEntry>,
}

#[derive(Debug, Deserialize)]
struct DumpHeader {
    texts: Vec<TextMeta>,
}

/// Reads an activation dump file: a JSON header line
/// `{"texts":[{"text_id","completion_start","total_tokens"},...]}` followed
/// by line-delimited entries `{"text_id","token","feature","value"}`.
pub fn load_activations(path: &Path) -> Result<ActivationDump, SaeError> {
    let file = File::open(path).map_err(|source| SaeError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines().enumerate();

    let (header_line, header) = loop {
        match lines.next() {
            Some((idx, line)) => {
                let line = line.map_err(|source| SaeError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                break (idx + 1, line);
            }
            None => {
                return Err(SaeError::MalformedLine {
                    line: 1,
                    message: "missing header line".into(),
                })
            }
        }
    };
    let header: DumpHeader =
        serde_json::from_str(&header).map_err(|e| SaeError::MalformedLine {
            line: header_line,
            message: e.to_string(),
        })?;

    let mut totals = BTreeMap::new();
    for meta in &header.texts {
        if meta.completion_start > meta.total_tokens {
            return Err(SaeError::BadCompletionStart {
                text_id: meta.text_id.clone(),
                start: meta.completion_start,
                total: meta.total_tokens,
            });
        }
        if totals.insert(meta.text_id.clone(), meta.total_tokens).is_some() {
            return Err(SaeError::DuplicateTextId(meta.text_id.clone()));
        }
    }

    let mut entries = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|source| SaeError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ActivationEntry =
            serde_json::from_str(&line).map_err(|e| SaeError::MalformedLine {
                line: line_no,
                message: e.to_string(),
            })?;
        if entry.value < 0.0 || !entry.value.is_finite() {
            return Err(SaeError::NegativeActivation {
                line: line_no,
                feature: entry.feature,
                value: entry.value,
            });
        }
        let total = *totals
            .get(&entry.text_id)
            .ok_or_else(|| SaeError::UnknownTextId {
                line: line_no,
                text_id: entry.text_id.clone(),
            })?;
        if entry.token >= total {
            return Err(SaeError::TokenOutOfRange {
                line: line_no,
                token: entry.token,
                text_id: entry.text_id.clone(),
                total,
            });
        }
        entries.push(entry);
    }
    Ok(ActivationDump {
        texts: header.texts,
        entries,
    })
}

/// Per-text max-pooled activations over the completion region. Zeros are
/// omitted: a stored value is always positive.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledMatrix {
    pub text_ids: Vec<String>,
    /// (feature, text index) -> max activation over completion tokens.
    pub values: BTreeMap<(u64, usize), f64>,
}

impl PooledMatrix {
    pub fn n_texts(&self) -> usize {
        self.text_ids.len()
    }

    /// Texts on which `feature` activates (pooled value > 0).
    pub fn active_texts(&self, feature: u64) -> Vec<usize> {
        self.values
            .range((feature, 0)..=(feature, usize::MAX))
            .map(|((_, t), _)| *t)
            .collect()
    }

    pub fn features(&self) -> BTreeSet<u64> {
        self.values.keys().map(|(f, _)| *f).collect()
    }
}

/// Max-pools activations over completion tokens only (token index >=
/// `completion_start`). Prompt-region activations never contribute.
pub fn pool_completion(dump: &ActivationDump) -> PooledMatrix {
    let text_ids: Vec<String> = dump.texts.iter().map(|t| t.text_id.clone()).collect();
    let index_of: BTreeMap<&str, usize> = text_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let start_of: BTreeMap<&str, usize> = dump
        .texts
        .iter()
        .map(|t| (t.text_id.as_str(), t.completion_start))
        .collect();

    let mut values: BTreeMap<(u64, usize), f64> = BTreeMap::new();
    for entry in &dump.entries {
        let start = start_of[entry.text_id.as_str()];
        if entry.token < start || entry.value <= 0.0 {
            continue;
        }
        let text_idx = index_of[entry.text_id.as_str()];
        let slot = values.entry((entry.feature, text_idx)).or_insert(0.0);
        if entry.value > *slot {
            *slot = entry.value;
        }
    }
    PooledMatrix { text_ids, values }
}

/// Activation-frequency statistics for one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub feature_id: u64,
    /// Fraction of Model A texts on which the feature activates.
    pub freq_a: f64,
    pub freq_b: f64,
    /// freq_a - freq_b.
    pub diff: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl FeatureStats {
    /// The model this feature's activation difference points at. A zero
    /// diff defaults to A.
    pub fn implied_direction(&self) -> Direction {
        if self.diff < 0.0 {
            Direction::B
        } else {
            Direction::A
        }
    }
}

/// Computes per-feature activation frequencies for both sides and their
/// difference, over the union of features appearing in either matrix.
pub fn feature_frequency_diff(
    pooled_a: &PooledMatrix,
    pooled_b: &PooledMatrix,
) -> Result<Vec<FeatureStats>, SaeError> {
    if pooled_a.n_texts() == 0 {
        return Err(SaeError::ZeroTexts("A"));
    }
    if pooled_b.n_texts() == 0 {
        return Err(SaeError::ZeroTexts("B"));
    }
    let mut features = pooled_a.features();
    features.extend(pooled_b.features());
    Ok(features
        .into_iter()
        .map(|feature_id| {
            let count_a = pooled_a.active_texts(feature_id).len();
            let count_b = pooled_b.active_texts(feature_id).len();
            let freq_a = count_a as f64 / pooled_a.n_texts() as f64;
            let freq_b = count_b as f64 / pooled_b.n_texts() as f64;
            FeatureStats {
                feature_id,
                freq_a,
                freq_b,
                diff: freq_a - freq_b,
                label: None,
            }
        })
        .collect())
}

/// A candidate feature tagged with its implied direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    #[serde(flatten)]
    pub stats: FeatureStats,
    pub direction: Direction,
}

/// Top-k features by absolute frequency difference; ties break toward the
/// lower feature id. The result is independent of input order.
pub fn select_candidates(stats: &[FeatureStats], k: usize) -> Vec<Candidate> {
    let mut sorted: Vec<&FeatureStats> = stats.iter().collect();
    sorted.sort_by(|a, b| {
        b.diff
            .abs()
            .partial_cmp(&a.diff.abs())
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.feature_id.cmp(&b.feature_id))
    });
    sorted
        .into_iter()
        .take(k)
        .map(|s| Candidate {
            stats: s.clone(),
            direction: s.implied_direction(),
        })
        .collect()
}

fn numbered(texts: &[String]) -> String {
    if texts.is_empty() {
        return "(none)".into();
    }
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| format!("{}. {t}", i + 1))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Asks the relabeler model for a better feature label using positive and
/// (optional) negative activation examples. An empty reply keeps the
/// existing label and returns a warning instead of failing.
pub fn relabel_feature(
    gateway: &dyn Gateway,
    templates: &PromptTemplates,
    relabeler_model: &str,
    stats: &mut FeatureStats,
    positives: &[String],
    negatives: &[String],
) -> Result<Option<String>, SaeError> {
    if positives.is_empty() {
        return Err(SaeError::NoPositives(stats.feature_id));
    }
    let feature_id = stats.feature_id.to_string();
    let current = stats.label.clone().unwrap_or_else(|| "(none)".into());
    let user = templates.render(
        "relabel_feature",
        &[
            ("feature_id", feature_id.as_str()),
            ("current_label", current.as_str()),
            ("positives", &numbered(positives)),
            ("negatives", &numbered(negatives)),
        ],
    )?;
    let response = complete(
        gateway,
        relabeler_model,
        None,
        &user,
        &GenerationConfig::default(),
    )?;
    let label = response.text().trim().to_string();
    if label.is_empty() {
        let warning = format!(
            "relabeler returned empty output for feature {}; keeping existing label",
            stats.feature_id
        );
        log::warn!("{warning}");
        return Ok(Some(warning));
    }
    stats.label = Some(label);
    Ok(None)
}

#[derive(Debug, Deserialize)]
struct SummarizedHypothesis {
    text: String,
    direction: Direction,
    features: Vec<u64>,
}

fn parse_feature_summary(text: &str) -> Option<Vec<SummarizedHypothesis>> {
    serde_json::from_str(text.trim()).ok()
}

/// Summarizes labeled candidates into at most `n` hypotheses. The
/// summarizer may merge features with near-identical labels; merged
/// features must share a direction, and `support` records the merge count.
/// Output beyond `n` hypotheses is truncated with a warning.
pub fn summarize_to_hypotheses(
    gateway: &dyn Gateway,
    templates: &PromptTemplates,
    summarizer_model: &str,
    candidates: &[Candidate],
    n: usize,
) -> Result<Vec<Hypothesis>, SaeError> {
    let by_id: BTreeMap<u64, &Candidate> =
        candidates.iter().map(|c| (c.stats.feature_id, c)).collect();
    let listing = candidates
        .iter()
        .map(|c| {
            format!(
                "feature {}: {} (model {})",
                c.stats.feature_id,
                c.stats.label.as_deref().unwrap_or("(unlabeled)"),
                c.direction
            )
        })
        .collect::<Vec<_>>()
        .join("\n");
    let n_str = n.to_string();
    let user = templates.render(
        "summarize_features",
        &[("candidates", listing.as_str()), ("n", n_str.as_str())],
    )?;
    let gen = GenerationConfig::default();
    let first = complete(gateway, summarizer_model, None, &user, &gen)?;
    let parsed = match parse_feature_summary(first.text()) {
        Some(parsed) => parsed,
        None => {
            let retry_user = format!("{user}{FORMAT_REPROMPT}");
            let second = complete(gateway, summarizer_model, None, &retry_user, &gen)?;
            parse_feature_summary(second.text()).ok_or_else(|| SaeError::BadSummary {
                raw: second.text().to_string(),
            })?
        }
    };

    let mut hypotheses = Vec::new();
    for item in parsed {
        if item.text.trim().is_empty() || item.features.is_empty() {
            return Err(SaeError::BadSummary {
                raw: format!("{:?} over features {:?}", item.text, item.features),
            });
        }
        for f in &item.features {
            let candidate = by_id.get(f).ok_or(SaeError::UnknownFeature(*f))?;
            if candidate.direction != item.direction {
                return Err(SaeError::ConflictingDirections {
                    raw: format!(
                        "hypothesis {:?} (model {}) uses feature {f} attributed to model {}",
                        item.text, item.direction, candidate.direction
                    ),
                });
            }
        }
        hypotheses.push(Hypothesis {
            id: format!("sae-{:03}", hypotheses.len() + 1),
            text: item.text.trim().to_string(),
            direction: item.direction,
            method: Method::Sae,
            support: item.features.len(),
            majority_fraction: 1.0,
        });
    }
    if hypotheses.len() > n {
        log::warn!(
            "summarizer produced {} hypotheses for n={n}; truncating",
            hypotheses.len()
        );
        hypotheses.truncate(n);
    }
    Ok(hypotheses)
}

fn direction_words(text: &str) -> (bool, bool) {
    let lower = text.to_lowercase();
    let has = |w: &str| {
        lower
            .split(|c: char| !c.is_alphanumeric())
            .any(|tok| tok == w)
    };
    (has("more"), has("less") || has("fewer"))
}

/// Rewrites a hypothesis into the shared phrasing voice without touching
/// direction, method, or support. A rewrite that flips comparative words
/// ("more" <-> "less") or comes back empty is rejected: the original text is
/// kept and a warning returned.
pub fn adjust_phrasing(
    gateway: &dyn Gateway,
    templates: &PromptTemplates,
    rewriter_model: &str,
    hypothesis: &Hypothesis,
) -> Result<(Hypothesis, Option<String>), SaeError> {
    let user = templates.render("adjust_phrasing", &[("hypothesis", hypothesis.text.as_str())])?;
    let response = complete(
        gateway,
        rewriter_model,
        None,
        &user,
        &GenerationConfig::default(),
    )?;
    let rewritten = response.text().trim().to_string();
    if rewritten.is_empty() {
        let warning = format!("rewriter returned empty output for {}; keeping original", hypothesis.id);
        log::warn!("{warning}");
        return Ok((hypothesis.clone(), Some(warning)));
    }
    let (orig_more, orig_less) = direction_words(&hypothesis.text);
    let (new_more, new_less) = direction_words(&rewritten);
    let flipped = (orig_more && !orig_less && new_less) || (orig_less && !orig_more && new_more);
    if flipped {
        let warning = format!(
            "rewriter flipped a direction word for {}; keeping original",
            hypothesis.id
        );
        log::warn!("{warning}");
        return Ok((hypothesis.clone(), Some(warning)));
    }
    let mut adjusted = hypothesis.clone();
    adjusted.text = rewritten;
    Ok((adjusted, None))
}

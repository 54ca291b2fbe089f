//! The LLM-based diffing pipeline: per-triplet difference extraction,
//! attribution normalization, embedding, dimensionality reduction, density
//! clustering, cluster summarization, and direction assignment.

pub mod hdbscan;
pub mod pca;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Triplet;
use crate::gateway::{complete, Gateway, GatewayError, GenerationConfig};
use crate::hypothesis::{Direction, Hypothesis, Method};
use crate::prompts::{PromptTemplates, TemplateError, FORMAT_REPROMPT};
use hdbscan::ClusterError;
use pca::PcaError;

/// Placeholder substituted for model names before embedding, so differences
/// describing the same behavior cluster together regardless of direction.
pub const MODEL_PLACEHOLDER: &str = "\u{27e8}MODEL\u{27e9}";

#[derive(Debug, Error)]
pub enum DiffLlmError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Pca(#[from] PcaError),
    #[error(transparent)]
    Cluster(#[from] ClusterError),
    #[error("extractor output unparseable: {raw}")]
    BadExtraction { raw: String },
    #[error("no unique attribution for {text:?}: {reason}")]
    AmbiguousAttribution { text: String, reason: String },
    #[error("empty summary from summarizer")]
    EmptySummary,
    #[error("non-atomic summary: {raw}")]
    MultiClaimSummary { raw: String },
    #[error("triplet has an empty response")]
    EmptyResponse,
    #[error("cluster member {0} has no recorded attribution")]
    MissingAttribution(usize),
    #[error("{got} reduced rows provided for {expected} difference records")]
    ReducedShapeMismatch { got: usize, expected: usize },
}

/// A difference description as returned by the extractor, before
/// normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDifference {
    pub triplet_id: String,
    pub text: String,
}

/// A normalized difference: original text, recovered attribution, and the
/// placeholder form used for embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceRecord {
    pub triplet_id: String,
    pub text: String,
    pub attributed_to: Direction,
    pub neutral_text: String,
}

/// One non-noise cluster of difference records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Cluster {
    pub label: usize,
    /// Indices into the record/point list.
    pub member_ids: Vec<usize>,
    pub centroid: Vec<f64>,
}

/// Clustering result: clusters partition the non-noise points.
#[derive(Debug, Clone)]
pub struct Clustering {
    pub clusters: Vec<Cluster>,
    pub noise: Vec<usize>,
    pub labels: Vec<i64>,
}

/// Outcome of majority counting over a cluster's attributions.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectedClaim {
    pub direction: Direction,
    pub support: usize,
    pub majority_fraction: f64,
}

fn find_mentions(text: &str, needle: &str) -> Vec<(usize, usize)> {
    let lower = text.to_lowercase();
    let needle = needle.to_lowercase();
    let mut spans = Vec::new();
    let mut start = 0;
    while let Some(pos) = lower[start..].find(&needle) {
        let begin = start + pos;
        let end = begin + needle.len();
        let before_ok = begin == 0
            || !lower[..begin]
                .chars()
                .next_back()
                .is_some_and(|c| c.is_alphanumeric());
        let after_ok = end == lower.len()
            || !lower[end..].chars().next().is_some_and(|c| c.is_alphanumeric());
        if before_ok && after_ok {
            spans.push((begin, end));
        }
        start = end;
    }
    spans
}

/// Replaces every mention of "Model A" or "Model B" with the placeholder
/// and records which model was named. A description naming both models or
/// neither is rejected.
pub fn normalize_attribution(raw: &RawDifference) -> Result<DifferenceRecord, DiffLlmError> {
    let mentions_a = find_mentions(&raw.text, "model a");
    let mentions_b = find_mentions(&raw.text, "model b");
    let attributed_to = match (mentions_a.is_empty(), mentions_b.is_empty()) {
        (false, true) => Direction::A,
        (true, false) => Direction::B,
        (false, false) => {
            return Err(DiffLlmError::AmbiguousAttribution {
                text: raw.text.clone(),
                reason: "names both models".into(),
            })
        }
        (true, true) => {
            return Err(DiffLlmError::AmbiguousAttribution {
                text: raw.text.clone(),
                reason: "names neither model".into(),
            })
        }
    };
    let spans = if attributed_to == Direction::A {
        mentions_a
    } else {
        mentions_b
    };
    let mut neutral = String::with_capacity(raw.text.len());
    let mut cursor = 0;
    for (begin, end) in spans {
        neutral.push_str(&raw.text[cursor..begin]);
        neutral.push_str(MODEL_PLACEHOLDER);
        cursor = end;
    }
    neutral.push_str(&raw.text[cursor..]);
    Ok(DifferenceRecord {
        triplet_id: raw.triplet_id.clone(),
        text: raw.text.clone(),
        attributed_to,
        neutral_text: neutral,
    })
}

fn parse_extraction(text: &str) -> Option<Vec<String>> {
    let value: serde_json::Value = serde_json::from_str(text.trim()).ok()?;
    let array = value.as_array()?;
    array
        .iter()
        .map(|v| v.as_str().map(str::to_owned))
        .collect()
}

/// Result of extracting one triplet: normalized records plus any raw
/// descriptions that failed attribution.
#[derive(Debug, Clone, Default)]
pub struct ExtractionOutcome {
    pub records: Vec<DifferenceRecord>,
    pub rejected: Vec<String>,
}

/// Asks the extractor model for qualitative differences between the two
/// responses of a triplet. Unparseable output is reprompted once, then
/// surfaced as an error carrying the raw text.
pub fn extract_differences(
    gateway: &dyn Gateway,
    templates: &PromptTemplates,
    extractor_model: &str,
    triplet: &Triplet,
) -> Result<ExtractionOutcome, DiffLlmError> {
    if triplet.response_a.is_empty() || triplet.response_b.is_empty() {
        return Err(DiffLlmError::EmptyResponse);
    }
    let user = templates.render(
        "extract_differences",
        &[
            ("prompt", &triplet.prompt),
            ("response_a", &triplet.response_a),
            ("response_b", &triplet.response_b),
        ],
    )?;
    let gen = GenerationConfig::default();
    let first = complete(gateway, extractor_model, None, &user, &gen)?;
    let texts = match parse_extraction(first.text()) {
        Some(texts) => texts,
        None => {
            let retry_user = format!("{user}{FORMAT_REPROMPT}");
            let second = complete(gateway, extractor_model, None, &retry_user, &gen)?;
            parse_extraction(second.text()).ok_or_else(|| DiffLlmError::BadExtraction {
                raw: second.text().to_string(),
            })?
        }
    };
    let mut outcome = ExtractionOutcome::default();
    for text in texts {
        let raw = RawDifference {
            triplet_id: triplet.prompt_id.clone(),
            text,
        };
        match normalize_attribution(&raw) {
            Ok(record) => outcome.records.push(record),
            Err(e) => {
                log::warn!("triplet {}: dropped difference: {e}", triplet.prompt_id);
                outcome.rejected.push(raw.text);
            }
        }
    }
    Ok(outcome)
}

/// Groups reduced points with HDBSCAN and wraps the labels into clusters
/// with centroids. Inputs smaller than `min_cluster_size` come back as all
/// noise.
pub fn cluster_differences(
    points: &[Vec<f64>],
    min_cluster_size: usize,
    min_samples: usize,
) -> Result<Clustering, ClusterError> {
    let labels = hdbscan::hdbscan(points, min_cluster_size, min_samples)?;
    let mut members: BTreeMap<i64, Vec<usize>> = BTreeMap::new();
    let mut noise = Vec::new();
    for (idx, &label) in labels.iter().enumerate() {
        if label < 0 {
            noise.push(idx);
        } else {
            members.entry(label).or_default().push(idx);
        }
    }
    let clusters = members
        .into_iter()
        .map(|(label, member_ids)| {
            let dim = points[member_ids[0]].len();
            let mut centroid = vec![0.0; dim];
            for &m in &member_ids {
                for (c, v) in centroid.iter_mut().zip(&points[m]) {
                    *c += v;
                }
            }
            for c in &mut centroid {
                *c /= member_ids.len() as f64;
            }
            Cluster {
                label: label as usize,
                member_ids,
                centroid,
            }
        })
        .collect();
    Ok(Clustering {
        clusters,
        noise,
        labels,
    })
}

fn is_single_claim(text: &str) -> bool {
    let trimmed = text.trim();
    if trimmed.is_empty() {
        return false;
    }
    // Drop one trailing terminal mark, then any internal sentence boundary
    // (terminal mark followed by whitespace) means multiple claims.
    let body = trimmed.trim_end_matches(['.', '!', '?']);
    let mut chars = body.chars().peekable();
    while let Some(c) = chars.next() {
        if matches!(c, '.' | '!' | '?') && chars.peek().is_some_and(|n| n.is_whitespace()) {
            return false;
        }
    }
    true
}

/// Summarizes a cluster's difference descriptions into one direction-free
/// hypothesis sentence. Empty or multi-sentence output is reprompted once.
pub fn summarize_cluster(
    gateway: &dyn Gateway,
    templates: &PromptTemplates,
    summarizer_model: &str,
    member_texts: &[String],
) -> Result<String, DiffLlmError> {
    let listing = member_texts
        .iter()
        .map(|t| format!("- {t}"))
        .collect::<Vec<_>>()
        .join("\n");
    let user = templates.render("summarize_cluster", &[("differences", &listing)])?;
    let gen = GenerationConfig::default();

    let check = |raw: &str| -> Result<String, DiffLlmError> {
        let text = raw.trim().to_string();
        if text.is_empty() {
            Err(DiffLlmError::EmptySummary)
        } else if !is_single_claim(&text) {
            Err(DiffLlmError::MultiClaimSummary { raw: text })
        } else {
            Ok(text)
        }
    };

    let first = complete(gateway, summarizer_model, None, &user, &gen)?;
    match check(first.text()) {
        Ok(summary) => Ok(summary),
        Err(_) => {
            let retry_user = format!("{user}{FORMAT_REPROMPT}");
            let second = complete(gateway, summarizer_model, None, &retry_user, &gen)?;
            check(second.text())
        }
    }
}

/// Majority vote over a cluster's attributions. Returns `None` (discard)
/// when there is no strict majority or the majority fraction is below the
/// threshold.
pub fn assign_direction(attributions: &[Direction], threshold: f64) -> Option<DirectedClaim> {
    if attributions.is_empty() {
        return None;
    }
    let count_a = attributions.iter().filter(|d| **d == Direction::A).count();
    let count_b = attributions.len() - count_a;
    if count_a == count_b {
        return None;
    }
    let (direction, majority) = if count_a > count_b {
        (Direction::A, count_a)
    } else {
        (Direction::B, count_b)
    };
    let majority_fraction = majority as f64 / attributions.len() as f64;
    if majority_fraction < threshold {
        return None;
    }
    Some(DirectedClaim {
        direction,
        support: attributions.len(),
        majority_fraction,
    })
}

/// Knobs for the end-to-end LLM pipeline.
#[derive(Debug, Clone)]
pub struct LlmPipelineConfig {
    pub extractor_model: String,
    pub summarizer_model: String,
    pub pca_components: usize,
    pub min_cluster_size: usize,
    pub min_samples: Option<usize>,
    pub direction_threshold: f64,
    pub parallelism: usize,
}

impl Default for LlmPipelineConfig {
    fn default() -> Self {
        Self {
            extractor_model: "extractor".into(),
            summarizer_model: "summarizer".into(),
            pca_components: 128,
            min_cluster_size: 8,
            min_samples: None,
            direction_threshold: 0.65,
            parallelism: 4,
        }
    }
}

/// Everything the LLM pipeline produced for one run.
#[derive(Debug, Clone)]
pub struct LlmPipelineOutput {
    pub differences: Vec<DifferenceRecord>,
    pub hypotheses: Vec<Hypothesis>,
    pub discarded_clusters: usize,
    pub noise_points: usize,
    pub warnings: Vec<String>,
}

/// Runs extraction, normalization, embedding, reduction, clustering,
/// summarization, and direction assignment over the generation triplets.
/// `external_reduced`, when given, replaces the built-in PCA step with
/// precomputed reduced embeddings (one row per difference record).
pub fn run_llm_pipeline(
    gateway: &dyn Gateway,
    templates: &PromptTemplates,
    config: &LlmPipelineConfig,
    triplets: &[Triplet],
    external_reduced: Option<Vec<Vec<f64>>>,
) -> Result<LlmPipelineOutput, DiffLlmError> {
    let mut warnings = Vec::new();

    // Extraction, parallel across triplets with results in input order.
    let workers = config.parallelism.max(1).min(triplets.len().max(1));
    let next = std::sync::atomic::AtomicUsize::new(0);
    let slots: Vec<std::sync::Mutex<Option<Result<ExtractionOutcome, DiffLlmError>>>> =
        triplets.iter().map(|_| std::sync::Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if idx >= triplets.len() {
                    break;
                }
                let result = extract_differences(
                    gateway,
                    templates,
                    &config.extractor_model,
                    &triplets[idx],
                );
                *slots[idx].lock().unwrap() = Some(result);
            });
        }
    });

    let mut differences = Vec::new();
    for (triplet, slot) in triplets.iter().zip(slots) {
        match slot.into_inner().unwrap().expect("extraction slot filled") {
            Ok(outcome) => {
                if !outcome.rejected.is_empty() {
                    warnings.push(format!(
                        "triplet {}: {} difference(s) without unique attribution dropped",
                        triplet.prompt_id,
                        outcome.rejected.len()
                    ));
                }
                differences.extend(outcome.records);
            }
            Err(e) => warnings.push(format!(
                "triplet {}: extraction failed: {e}",
                triplet.prompt_id
            )),
        }
    }

    if differences.len() < config.min_cluster_size {
        warnings.push(format!(
            "only {} differences extracted; too few to cluster",
            differences.len()
        ));
        return Ok(LlmPipelineOutput {
            differences,
            hypotheses: Vec::new(),
            discarded_clusters: 0,
            noise_points: 0,
            warnings,
        });
    }

    let neutral_texts: Vec<String> = differences.iter().map(|d| d.neutral_text.clone()).collect();
    let points = match external_reduced {
        Some(rows) => {
            if rows.len() != differences.len() {
                return Err(DiffLlmError::ReducedShapeMismatch {
                    got: rows.len(),
                    expected: differences.len(),
                });
            }
            rows
        }
        None => {
            let embeddings = gateway.embed(&neutral_texts)?;
            let dim = embeddings.first().map(Vec::len).unwrap_or(0);
            let k = config.pca_components.min(embeddings.len()).min(dim);
            if k == 0 || embeddings.len() < 2 {
                warnings.push("skipping reduction: not enough data".into());
                embeddings
            } else {
                let (reduced, model) = pca::reduce_dimensions(&embeddings, k)?;
                if model.zero_variance {
                    warnings.push("embedding matrix has zero variance".into());
                }
                reduced
            }
        }
    };

    let min_samples = config.min_samples.unwrap_or(config.min_cluster_size);
    let clustering = cluster_differences(&points, config.min_cluster_size, min_samples)?;

    let mut hypotheses = Vec::new();
    let mut discarded = 0;
    for cluster in &clustering.clusters {
        let member_texts: Vec<String> = cluster
            .member_ids
            .iter()
            .map(|&i| differences[i].neutral_text.clone())
            .collect();
        let attributions: Vec<Direction> = cluster
            .member_ids
            .iter()
            .map(|&i| differences[i].attributed_to)
            .collect();
        let Some(claim) = assign_direction(&attributions, config.direction_threshold) else {
            discarded += 1;
            continue;
        };
        let summary = match summarize_cluster(
            gateway,
            templates,
            &config.summarizer_model,
            &member_texts,
        ) {
            Ok(summary) => summary,
            Err(e) => {
                warnings.push(format!("cluster {}: summarization failed: {e}", cluster.label));
                continue;
            }
        };
        hypotheses.push(Hypothesis {
            id: format!("llm-{:03}", hypotheses.len() + 1),
            text: summary,
            direction: claim.direction,
            method: Method::Llm,
            support: claim.support,
            majority_fraction: claim.majority_fraction,
        });
    }

    Ok(LlmPipelineOutput {
        differences,
        hypotheses,
        discarded_clusters: discarded,
        noise_points: clustering.noise.len(),
        warnings,
    })
}

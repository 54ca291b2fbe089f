//! Fork-token analysis: entropy-normalized KL divergence over top-k
//! logprobs, fork resampling from both models, and hypothesis generation
//! from the diverging completions.
//!
//! Both distributions are restricted to the union of their listed tokens;
//! tokens missing from one side get a floor probability before each side is
//! renormalized to sum 1. KL, both entropies, and the score
//! KL / (H1 + H2) are computed on that shared support, in nats.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError, GenerationConfig, LogprobDump};
use crate::hypothesis::{Direction, Hypothesis, Method};
use crate::prompts::{PromptTemplates, TemplateError, FORMAT_REPROMPT};

/// Floor probability assigned to tokens absent from one side's top-k list,
/// before renormalization.
pub const MISSING_TOKEN_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum KlError {
    #[error("empty top-k list for model {0}")]
    EmptyTopK(u8),
    #[error("model {model} top-k: positive logprob {logprob} for token {token:?}")]
    PositiveLogprob {
        model: u8,
        token: String,
        logprob: f64,
    },
    #[error("model {model} top-k not sorted descending at token {token:?}")]
    Unsorted { model: u8, token: String },
    #[error("model {model} top-k lists token {token:?} twice")]
    DuplicateToken { model: u8, token: String },
    #[error("misaligned dumps: response has {tokens} tokens, model 1 dump {dump1}, model 2 dump {dump2}")]
    Misaligned {
        tokens: usize,
        dump1: usize,
        dump2: usize,
    },
    #[error("incomplete sample set from {model}: got {got}, want {want}")]
    IncompleteSamples {
        model: String,
        got: usize,
        want: usize,
    },
    #[error("empty fork prefix")]
    EmptyPrefix,
    #[error("empty completion set for model {0}")]
    EmptyCompletions(u8),
    #[error("fork hypothesis generator output unparseable: {raw}")]
    BadGeneratorOutput { raw: String },
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Divergence measurements at one position.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForkScore {
    pub position: usize,
    /// KL(P1 || P2) in nats over the restricted support.
    pub kl: f64,
    /// Entropy of the model-1 distribution, nats.
    pub h1: f64,
    pub h2: f64,
    /// kl / (h1 + h2); 0 by convention when both entropies vanish.
    pub score: f64,
}

/// A position where the two models' next-token distributions disagree.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForkPoint {
    pub triplet_id: String,
    pub prompt: String,
    /// Generated text up to (excluding) the fork position.
    pub response_prefix: String,
    pub fork_token: String,
    pub score: ForkScore,
}

fn validate_top_k(list: &[(String, f64)], model: u8) -> Result<(), KlError> {
    if list.is_empty() {
        return Err(KlError::EmptyTopK(model));
    }
    let mut prev = f64::INFINITY;
    let mut seen = std::collections::BTreeSet::new();
    for (token, lp) in list {
        if *lp > 0.0 || lp.is_nan() {
            return Err(KlError::PositiveLogprob {
                model,
                token: token.clone(),
                logprob: *lp,
            });
        }
        if *lp > prev {
            return Err(KlError::Unsorted {
                model,
                token: token.clone(),
            });
        }
        if !seen.insert(token.as_str()) {
            return Err(KlError::DuplicateToken {
                model,
                token: token.clone(),
            });
        }
        prev = *lp;
    }
    Ok(())
}

/// Restricts both top-k distributions to their token union, floors missing
/// tokens, renormalizes each side to sum 1, and computes KL(P1 || P2), the
/// two entropies, and the normalized fork score.
pub fn positional_score(
    position: usize,
    top1: &[(String, f64)],
    top2: &[(String, f64)],
) -> Result<ForkScore, KlError> {
    validate_top_k(top1, 1)?;
    validate_top_k(top2, 2)?;

    let mut support: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for (token, lp) in top1 {
        support.insert(token.as_str(), (lp.exp(), MISSING_TOKEN_FLOOR));
    }
    for (token, lp) in top2 {
        support
            .entry(token.as_str())
            .and_modify(|pair| pair.1 = lp.exp())
            .or_insert((MISSING_TOKEN_FLOOR, lp.exp()));
    }

    let sum1: f64 = support.values().map(|(p, _)| p).sum();
    let sum2: f64 = support.values().map(|(_, q)| q).sum();
    debug_assert!(sum1 > 0.0 && sum2 > 0.0);

    let mut kl = 0.0;
    let mut h1 = 0.0;
    let mut h2 = 0.0;
    for (p_raw, q_raw) in support.values() {
        let p = p_raw / sum1;
        let q = q_raw / sum2;
        if p > 0.0 {
            kl += p * (p / q).ln();
            h1 -= p * p.ln();
        }
        if q > 0.0 {
            h2 -= q * q.ln();
        }
    }
    // numerical noise can leave tiny negatives on identical distributions
    let kl = kl.max(0.0);
    let h1 = h1.max(0.0);
    let h2 = h2.max(0.0);
    let score = if h1 + h2 > 0.0 { kl / (h1 + h2) } else { 0.0 };
    Ok(ForkScore {
        position,
        kl,
        h1,
        h2,
        score,
    })
}

/// Scores every position of a generated response against both models'
/// logprob dumps and returns the `top_n` highest-scoring fork points,
/// ties broken toward the earlier position.
pub fn find_fork_tokens(
    triplet_id: &str,
    prompt: &str,
    response_tokens: &[String],
    dump1: &LogprobDump,
    dump2: &LogprobDump,
    top_n: usize,
) -> Result<Vec<ForkPoint>, KlError> {
    if dump1.per_position.len() != response_tokens.len()
        || dump2.per_position.len() != response_tokens.len()
    {
        return Err(KlError::Misaligned {
            tokens: response_tokens.len(),
            dump1: dump1.per_position.len(),
            dump2: dump2.per_position.len(),
        });
    }
    let mut scores = Vec::with_capacity(response_tokens.len());
    for (pos, _) in response_tokens.iter().enumerate() {
        scores.push(positional_score(
            pos,
            &dump1.per_position[pos],
            &dump2.per_position[pos],
        )?);
    }
    scores.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.position.cmp(&b.position))
    });
    Ok(scores
        .into_iter()
        .take(top_n)
        .map(|score| ForkPoint {
            triplet_id: triplet_id.to_string(),
            prompt: prompt.to_string(),
            response_prefix: response_tokens[..score.position].concat(),
            fork_token: response_tokens[score.position].clone(),
            score,
        })
        .collect())
}

/// Samples `n` short continuations at a fork from each model, conditioned
/// on the user prompt and the response prefix up to the fork. Either model
/// coming up short is an error.
pub fn sample_fork_completions(
    gateway: &dyn Gateway,
    fork: &ForkPoint,
    model1: &str,
    model2: &str,
    n: usize,
    temperature: f64,
    max_tokens: usize,
) -> Result<(Vec<String>, Vec<String>), KlError> {
    if fork.response_prefix.is_empty() {
        return Err(KlError::EmptyPrefix);
    }
    let gen = GenerationConfig {
        max_new_tokens: max_tokens,
        temperature,
        top_logprobs: None,
        n_samples: n,
    };
    let mut sets = Vec::with_capacity(2);
    for model in [model1, model2] {
        let request = ChatRequest::new(model, fork.prompt.clone(), gen.clone())
            .with_assistant_prefix(fork.response_prefix.clone());
        let response = gateway.chat(&request).map_err(|e| match e {
            GatewayError::ScriptExhausted { model, have, want } => KlError::IncompleteSamples {
                model,
                got: have,
                want,
            },
            other => KlError::Gateway(other),
        })?;
        if response.samples.len() != n {
            return Err(KlError::IncompleteSamples {
                model: model.to_string(),
                got: response.samples.len(),
                want: n,
            });
        }
        sets.push(response.samples.into_iter().map(|s| s.text).collect::<Vec<_>>());
    }
    let second = sets.pop().expect("two sets");
    let first = sets.pop().expect("two sets");
    Ok((first, second))
}

#[derive(Debug, Deserialize)]
struct GeneratedHypothesis {
    text: String,
    direction: Direction,
}

fn parse_generated(text: &str) -> Option<Vec<GeneratedHypothesis>> {
    serde_json::from_str(text.trim()).ok()
}

/// Presents the two completion sets to the generator model and parses the
/// difference hypotheses it proposes (method `kl`). Texts pass through the
/// shared phrasing adjustment when a rewriter is given.
pub fn hypothesize_from_forks(
    gateway: &dyn Gateway,
    templates: &PromptTemplates,
    generator_model: &str,
    rewriter_model: Option<&str>,
    fork: &ForkPoint,
    completions1: &[String],
    completions2: &[String],
) -> Result<Vec<Hypothesis>, KlError> {
    if completions1.is_empty() {
        return Err(KlError::EmptyCompletions(1));
    }
    if completions2.is_empty() {
        return Err(KlError::EmptyCompletions(2));
    }
    let list = |set: &[String]| {
        set.iter()
            .enumerate()
            .map(|(i, c)| format!("{}: {c}", i + 1))
            .collect::<Vec<_>>()
            .join("\n")
    };
    let n1 = completions1.len().to_string();
    let n2 = completions2.len().to_string();
    let user = templates.render(
        "fork_hypotheses",
        &[
            ("n1", n1.as_str()),
            ("n2", n2.as_str()),
            ("prompt", fork.prompt.as_str()),
            ("prefix", fork.response_prefix.as_str()),
            ("completions1", &list(completions1)),
            ("completions2", &list(completions2)),
        ],
    )?;
    let gen = GenerationConfig::default();
    let first = crate::gateway::complete(gateway, generator_model, None, &user, &gen)?;
    let parsed = match parse_generated(first.text()) {
        Some(parsed) => parsed,
        None => {
            let retry_user = format!("{user}{FORMAT_REPROMPT}");
            let second = crate::gateway::complete(gateway, generator_model, None, &retry_user, &gen)?;
            parse_generated(second.text()).ok_or_else(|| KlError::BadGeneratorOutput {
                raw: second.text().to_string(),
            })?
        }
    };

    let mut hypotheses = Vec::new();
    for item in parsed {
        if item.text.trim().is_empty() {
            return Err(KlError::BadGeneratorOutput {
                raw: "empty hypothesis text".into(),
            });
        }
        let mut hypothesis = Hypothesis {
            id: format!("kl-{:03}", hypotheses.len() + 1),
            text: item.text.trim().to_string(),
            direction: item.direction,
            method: Method::Kl,
            support: 1,
            majority_fraction: 1.0,
        };
        if let Some(rewriter) = rewriter_model {
            let (adjusted, warning) =
                crate::diff_sae::adjust_phrasing(gateway, templates, rewriter, &hypothesis)
                    .map_err(|e| KlError::BadGeneratorOutput { raw: e.to_string() })?;
            if let Some(w) = warning {
                log::warn!("{w}");
            }
            hypothesis = adjusted;
        }
        hypotheses.push(hypothesis);
    }
    Ok(hypotheses)
}

/// One line of the paired logprob dump file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PositionRecord {
    pub pos: usize,
    pub token: String,
    pub top1: Vec<(String, f64)>,
    pub top2: Vec<(String, f64)>,
}

/// A response's tokens with both models' per-position top-k lists.
#[derive(Debug, Clone)]
pub struct PairedDump {
    pub tokens: Vec<String>,
    pub dump1: LogprobDump,
    pub dump2: LogprobDump,
}

/// Loads a paired dump file: line-delimited
/// `{"pos","token","top1":[[token,logprob],...],"top2":[...]}` records,
/// positions consecutive from 0.
pub fn load_paired_dump(path: &Path) -> Result<PairedDump, KlError> {
    let file = File::open(path).map_err(|source| KlError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records: Vec<PositionRecord> = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| KlError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PositionRecord =
            serde_json::from_str(&line).map_err(|e| KlError::MalformedLine {
                line: idx + 1,
                message: e.to_string(),
            })?;
        if record.pos != records.len() {
            return Err(KlError::MalformedLine {
                line: idx + 1,
                message: format!("expected position {}, found {}", records.len(), record.pos),
            });
        }
        records.push(record);
    }
    let tokens: Vec<String> = records.iter().map(|r| r.token.clone()).collect();
    let dump1 = LogprobDump {
        tokens: tokens.clone(),
        per_position: records.iter().map(|r| r.top1.clone()).collect(),
    };
    let dump2 = LogprobDump {
        tokens: tokens.clone(),
        per_position: records.into_iter().map(|r| r.top2).collect(),
    };
    Ok(PairedDump {
        tokens,
        dump1,
        dump2,
    })
}

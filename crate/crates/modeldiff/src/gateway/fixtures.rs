//! Bundled deterministic pipeline fixtures.
//!
//! A fixture is a fully scripted model pair plus every auxiliary role the
//! pipeline needs (extractor, summarizer, relabeler, rewriter, judge, fork
//! generator, raters), implemented as responder functions that react to the
//! rendered prompt content. Two fixtures ship with the crate:
//!
//! - `table`: Model B appends a Markdown table to ~12% of its responses.
//!   Covers every stage including SAE dumps and KL fork dumps.
//! - `length`: Model A answers in ~70 whitespace tokens, Model B in ~500.
//!   Covers the LLM pipeline stages.
//!
//! Everything is a pure function of the fixture seed and the request, so
//! repeated runs are byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::mock::MockBackend;
use super::ChatRequest;
use crate::prompts::FORMAT_REPROMPT;

pub const TABLE_FIXTURE: &str = "table";
pub const LENGTH_FIXTURE: &str = "length";

/// A configured mock backend with the fixture's target model names.
pub struct FixtureSpec {
    pub backend: MockBackend,
    pub model_a: String,
    pub model_b: String,
}

/// Input files a fixture writes for the runner.
#[derive(Debug, Clone)]
pub struct FixtureInputs {
    pub prompts: PathBuf,
    pub n_prompts: usize,
    pub sae_dump_a: Option<PathBuf>,
    pub sae_dump_b: Option<PathBuf>,
    pub kl_dump_dir: Option<PathBuf>,
}

fn stable_hash(parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0x1f]);
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let to = text[from..].find(end)? + from;
    Some(&text[from..to])
}

fn after<'a>(text: &'a str, start: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    Some(&text[from..])
}

fn strip_reprompt(text: &str) -> &str {
    text.strip_suffix(FORMAT_REPROMPT).unwrap_or(text)
}

fn has_table(text: &str) -> bool {
    text.lines().any(|l| l.trim_start().starts_with('|'))
}

fn token_count(text: &str) -> usize {
    text.split_whitespace().count()
}

fn capitalize(text: &str) -> String {
    let mut chars = text.chars();
    match chars.next() {
        Some(first) => first.to_uppercase().collect::<String>() + chars.as_str(),
        None => String::new(),
    }
}

const MARKDOWN_TABLE: &str = "\n\n| item | value |\n| --- | --- |\n| alpha | 1 |\n| beta | 2 |";

fn table_roll(seed: u64, prompt: &str) -> bool {
    stable_hash(&["table-roll", &seed.to_string(), prompt]) % 1000 < 120
}

fn greeting_roll(prompt: &str) -> bool {
    stable_hash(&["filler", prompt]).is_multiple_of(9)
}

fn base_paragraph(prompt: &str) -> String {
    format!(
        "Here is a direct take on the request. {prompt} The key considerations are context, \
         clarity, and correctness, each of which shapes the final answer in its own way. \
         Overall the topic rewards a careful, plain-prose treatment."
    )
}

// ----- shared responders -----

fn parse_extraction_sections(user: &str) -> Option<(String, String)> {
    let user = strip_reprompt(user);
    let a = between(user, "**Model A Response:**\n", "\n\n**Model B Response:**")?;
    let b = after(user, "**Model B Response:**\n")?;
    Some((a.to_string(), b.trim_end().to_string()))
}

fn register_judge(backend: &mut MockBackend) {
    backend.register_responder("judge", |req: &ChatRequest, _| {
        let user = strip_reprompt(&req.user);
        let hypotheses = between(user, "**Hypotheses:**\n", "\n\n**User Prompt:**")
            .ok_or("judge fixture: missing hypotheses section")?;
        let r1 = between(user, "**Model 1 Response:**\n", "\n\n**Model 2 Response:**")
            .ok_or("judge fixture: missing response 1")?;
        let r2 = between(user, "**Model 2 Response:**\n", "\n\nReturn exactly one JSON object")
            .ok_or("judge fixture: missing response 2")?;

        let mut output = serde_json::Map::new();
        for line in hypotheses.lines() {
            let Some((label, text)) = line.split_once(": ") else {
                continue;
            };
            let lower = text.to_lowercase();
            let choice: serde_json::Value = if lower.contains("table") {
                match (has_table(r1), has_table(r2)) {
                    (true, false) => 1.into(),
                    (false, true) => 2.into(),
                    _ => "N/A".into(),
                }
            } else if lower.contains("dollar") {
                match (r1.contains("$$"), r2.contains("$$")) {
                    (true, false) => 1.into(),
                    (false, true) => 2.into(),
                    _ => "N/A".into(),
                }
            } else if lower.contains("shorter") {
                let (n1, n2) = (token_count(r1), token_count(r2));
                if n1 * 3 < n2 * 2 {
                    1.into()
                } else if n2 * 3 < n1 * 2 {
                    2.into()
                } else {
                    "N/A".into()
                }
            } else {
                "N/A".into()
            };
            output.insert(label.to_string(), choice);
        }
        Ok(serde_json::Value::Object(output).to_string())
    });
}

fn register_summarizer(backend: &mut MockBackend) {
    backend.register_responder("summarizer", |req: &ChatRequest, _| {
        let user = strip_reprompt(&req.user);
        if user.contains("**Candidate features:**") {
            // feature summary: group candidate lines by (label, model)
            let listing = after(user, "**Candidate features:**\n")
                .ok_or("summarizer fixture: missing candidates")?;
            let mut groups: BTreeMap<(String, String), Vec<u64>> = BTreeMap::new();
            for line in listing.lines() {
                let Some(rest) = line.strip_prefix("feature ") else {
                    continue;
                };
                let Some((id, rest)) = rest.split_once(": ") else {
                    continue;
                };
                let Some((label, model)) = rest.rsplit_once(" (model ") else {
                    continue;
                };
                let model = model.trim_end_matches(')');
                let id: u64 = id.trim().parse().map_err(|_| "bad feature id")?;
                groups
                    .entry((label.to_string(), model.to_string()))
                    .or_default()
                    .push(id);
            }
            let items: Vec<serde_json::Value> = groups
                .into_iter()
                .map(|((label, model), features)| {
                    serde_json::json!({
                        "text": format!("Uses more {label}"),
                        "direction": model,
                        "features": features,
                    })
                })
                .collect();
            return Ok(serde_json::Value::Array(items).to_string());
        }
        // cluster summary: most common member line, placeholder stripped
        let listing = after(user, "**Differences:**\n")
            .ok_or("summarizer fixture: missing differences")?;
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for line in listing.lines() {
            if let Some(text) = line.strip_prefix("- ") {
                *counts.entry(text).or_default() += 1;
            }
        }
        let (most_common, _) = counts
            .into_iter()
            .max_by_key(|(text, count)| (*count, std::cmp::Reverse(*text)))
            .ok_or("summarizer fixture: empty cluster")?;
        let stripped = most_common
            .strip_prefix("\u{27e8}MODEL\u{27e9} ")
            .unwrap_or(most_common);
        Ok(capitalize(stripped))
    });
}

fn register_rewriter(backend: &mut MockBackend) {
    backend.register_responder("rewriter", |req: &ChatRequest, _| {
        let user = strip_reprompt(&req.user);
        let text = after(user, "Hypothesis: ").ok_or("rewriter fixture: missing hypothesis")?;
        Ok(text.trim().to_string())
    });
}

fn register_raters(backend: &mut MockBackend) {
    for rater in ["rater-1", "rater-2", "rater-3"] {
        let rater_name = rater.to_string();
        backend.register_responder(rater, move |req: &ChatRequest, _| {
            let system = req.system.as_deref().unwrap_or_default();
            let interestingness = system.contains("Interestingness Autorater");
            let hypothesis = after(strip_reprompt(&req.user), "Hypothesis to rate:\n")
                .ok_or("rater fixture: missing hypothesis")?
                .trim();
            let dimension = if interestingness { "int" } else { "abs" };
            let score = 1 + stable_hash(&[&rater_name, dimension, hypothesis]) % 5;
            let signals = if interestingness {
                serde_json::json!({"impact": score, "novelty": score, "specificity": score, "actionability": score})
            } else {
                serde_json::json!({"scope": score, "generality": score, "conceptual_depth": score})
            };
            Ok(serde_json::json!({
                "score": score,
                "rationale": "fixture deterministic rating",
                "signals": signals,
            })
            .to_string())
        });
    }
}

fn register_fork_generator(backend: &mut MockBackend) {
    backend.register_responder("fork-generator", |req: &ChatRequest, _| {
        let user = strip_reprompt(&req.user);
        let c1 = between(user, "**Model 1 continuations:**\n", "\n\n**Model 2 continuations:**")
            .ok_or("fork fixture: missing model 1 continuations")?;
        let c2 = after(user, "**Model 2 continuations:**\n")
            .ok_or("fork fixture: missing model 2 continuations")?;
        let doubles = |set: &str| {
            let lines: Vec<&str> = set.lines().filter(|l| !l.trim().is_empty()).collect();
            !lines.is_empty() && lines.iter().all(|l| l.contains("$$"))
        };
        let items: Vec<serde_json::Value> = match (doubles(c1), doubles(c2)) {
            (true, false) => vec![serde_json::json!({
                "text": "Uses more double dollar sign display math delimiters",
                "direction": "A",
            })],
            (false, true) => vec![serde_json::json!({
                "text": "Uses more double dollar sign display math delimiters",
                "direction": "B",
            })],
            _ => Vec::new(),
        };
        Ok(serde_json::Value::Array(items).to_string())
    });
}

// ----- table fixture -----

fn build_table(seed: u64) -> FixtureSpec {
    let mut backend = MockBackend::new().with_embed_seed(seed);

    backend.register_responder("plain", move |req: &ChatRequest, idx| {
        if req.assistant_prefix.is_some() {
            return Ok(format!(" $E = mc^2$ as single-dollar inline math ({idx})"));
        }
        Ok(base_paragraph(&req.user))
    });
    backend.register_responder("tabled", move |req: &ChatRequest, idx| {
        if req.assistant_prefix.is_some() {
            return Ok(format!(" $$E = mc^2$$ as double-dollar display math ({idx})"));
        }
        let mut text = base_paragraph(&req.user);
        if table_roll(seed, &req.user) {
            text.push_str(MARKDOWN_TABLE);
        }
        Ok(text)
    });

    backend.register_responder("extractor", |req: &ChatRequest, _| {
        let (a, b) = parse_extraction_sections(&req.user)
            .ok_or("extractor fixture: missing response sections")?;
        let prompt = between(strip_reprompt(&req.user), "**User Prompt:**\n", "\n\n**Model A Response:**")
            .ok_or("extractor fixture: missing prompt")?;
        let mut differences: Vec<String> = Vec::new();
        match (has_table(&a), has_table(&b)) {
            (true, false) => differences.push("Model A includes a Markdown table".into()),
            (false, true) => differences.push("Model B includes a Markdown table".into()),
            _ => {}
        }
        if greeting_roll(prompt) {
            differences.push("Model B uses a polite greeting".into());
        }
        Ok(serde_json::to_string(&differences).expect("serializable"))
    });

    backend.register_responder("relabeler", |req: &ChatRequest, _| {
        let user = strip_reprompt(&req.user);
        let id_line = between(user, "Feature: ", "\n").ok_or("relabeler fixture: missing id")?;
        let label = match id_line.trim() {
            "7" => "markdown table pipe and hyphen characters",
            "12" => "verbose preamble phrasing",
            _ => "generic stylistic filler",
        };
        Ok(label.to_string())
    });

    register_judge(&mut backend);
    register_summarizer(&mut backend);
    register_rewriter(&mut backend);
    register_raters(&mut backend);
    register_fork_generator(&mut backend);

    FixtureSpec {
        backend,
        model_a: "plain".into(),
        model_b: "tabled".into(),
    }
}

// ----- length fixture -----

fn words(prefix: &str, n: usize) -> String {
    (0..n).map(|k| format!("{prefix}{k}")).collect::<Vec<_>>().join(" ")
}

fn build_length(seed: u64) -> FixtureSpec {
    let mut backend = MockBackend::new().with_embed_seed(seed);

    backend.register_responder("short", move |req: &ChatRequest, _| {
        let n = 65 + (stable_hash(&["short-len", &seed.to_string(), &req.user]) % 11) as usize;
        Ok(format!("Summary: {}", words("point", n)))
    });
    backend.register_responder("long", move |req: &ChatRequest, _| {
        let n = 480 + (stable_hash(&["long-len", &seed.to_string(), &req.user]) % 41) as usize;
        Ok(format!("Detailed discussion: {}", words("clause", n)))
    });

    backend.register_responder("extractor", |req: &ChatRequest, _| {
        let (a, b) = parse_extraction_sections(&req.user)
            .ok_or("extractor fixture: missing response sections")?;
        let (n_a, n_b) = (token_count(&a).max(1), token_count(&b).max(1));
        let mut differences: Vec<String> = Vec::new();
        if n_a * 2 <= n_b {
            differences.push("Model A provides significantly shorter responses".into());
        } else if n_b * 2 <= n_a {
            differences.push("Model B provides significantly shorter responses".into());
        }
        Ok(serde_json::to_string(&differences).expect("serializable"))
    });

    register_judge(&mut backend);
    register_summarizer(&mut backend);
    register_rewriter(&mut backend);
    register_raters(&mut backend);

    FixtureSpec {
        backend,
        model_a: "short".into(),
        model_b: "long".into(),
    }
}

/// Builds a fixture backend by name.
pub fn build(name: &str, seed: u64) -> Option<FixtureSpec> {
    match name {
        TABLE_FIXTURE => Some(build_table(seed)),
        LENGTH_FIXTURE => Some(build_length(seed)),
        _ => None,
    }
}

// ----- input materialization -----

fn prompt_text(i: usize) -> String {
    format!("Fixture prompt {i:04}: describe topic {i} and its main trade-offs.")
}

fn prompt_id(i: usize) -> String {
    format!("p{i:04}")
}

fn write_prompts(path: &Path, n: usize) -> std::io::Result<()> {
    let mut out = String::new();
    for i in 1..=n {
        out.push_str(&format!(
            "{}\n",
            serde_json::json!({"id": prompt_id(i), "text": prompt_text(i)})
        ));
    }
    std::fs::write(path, out)
}

fn write_sae_dumps(dir: &Path, seed: u64, n: usize) -> std::io::Result<(PathBuf, PathBuf)> {
    const COMPLETION_START: usize = 4;
    const TOTAL_TOKENS: usize = 40;
    let texts: Vec<serde_json::Value> = (1..=n)
        .map(|i| {
            serde_json::json!({
                "text_id": prompt_id(i),
                "completion_start": COMPLETION_START,
                "total_tokens": TOTAL_TOKENS,
            })
        })
        .collect();
    let header = serde_json::json!({ "texts": texts }).to_string();

    let entry = |id: &str, token: usize, feature: u64, value: f64| {
        serde_json::json!({"text_id": id, "token": token, "feature": feature, "value": value})
            .to_string()
    };
    let noise_token = |side: &str, f: u64, i: usize| {
        COMPLETION_START
            + (stable_hash(&["tok", side, &f.to_string(), &i.to_string()]) as usize
                % (TOTAL_TOKENS - COMPLETION_START))
    };

    let mut lines_a = vec![header.clone()];
    let mut lines_b = vec![header];
    for i in 1..=n {
        let id = prompt_id(i);
        for f in 1..=30u64 {
            if f == 7 || f == 12 {
                continue;
            }
            // background features active on ~5% of either side
            if stable_hash(&["noiseA", &f.to_string(), &id]) % 100 < 5 {
                lines_a.push(entry(&id, noise_token("a", f, i), f, 0.4));
            }
            if stable_hash(&["noiseB", &f.to_string(), &id]) % 100 < 5 {
                lines_b.push(entry(&id, noise_token("b", f, i), f, 0.4));
            }
        }
        // feature 12 skews toward model A: 20% vs 5%
        if stable_hash(&["f12a", &id]) % 100 < 20 {
            lines_a.push(entry(&id, COMPLETION_START + 1, 12, 1.5));
        }
        if stable_hash(&["f12b", &id]) % 100 < 5 {
            lines_b.push(entry(&id, COMPLETION_START + 2, 12, 1.5));
        }
        // feature 7 fires on B's table responses; on A it only ever touches
        // prompt tokens, which pooling must ignore
        if table_roll(seed, &prompt_text(i)) {
            lines_b.push(entry(&id, COMPLETION_START + 3, 7, 2.0));
        }
        if stable_hash(&["f7-prompt", &id]) % 100 < 10 {
            lines_a.push(entry(&id, 1, 7, 2.0));
        }
    }
    let path_a = dir.join("sae_dump_a.jsonl");
    let path_b = dir.join("sae_dump_b.jsonl");
    std::fs::write(&path_a, lines_a.join("\n") + "\n")?;
    std::fs::write(&path_b, lines_b.join("\n") + "\n")?;
    Ok((path_a, path_b))
}

fn write_kl_dumps(dir: &Path) -> std::io::Result<PathBuf> {
    let kl_dir = dir.join("kl");
    std::fs::create_dir_all(&kl_dir)?;
    let near_one_hot = |tok: &str| {
        serde_json::json!([[tok, 0.98f64.ln()], [" alternatively", 0.02f64.ln()]])
    };
    for id in ["p0001", "p0002"] {
        let tokens = ["The", " equation", " is", " $$"];
        let mut lines = Vec::new();
        for (pos, token) in tokens.iter().enumerate() {
            let (top1, top2) = if *token == " $$" {
                (
                    serde_json::json!([[" $$", 0.9f64.ln()], [" $", 0.1f64.ln()]]),
                    serde_json::json!([[" $", 0.9f64.ln()], [" $$", 0.1f64.ln()]]),
                )
            } else {
                (near_one_hot(token), near_one_hot(token))
            };
            lines.push(
                serde_json::json!({"pos": pos, "token": token, "top1": top1, "top2": top2})
                    .to_string(),
            );
        }
        std::fs::write(kl_dir.join(format!("{id}.jsonl")), lines.join("\n") + "\n")?;
    }
    Ok(kl_dir)
}

/// Writes a fixture's input files (prompts, and for the table fixture the
/// SAE activation dumps and KL logprob dumps) into `dir`.
pub fn materialize_inputs(name: &str, seed: u64, dir: &Path) -> std::io::Result<Option<FixtureInputs>> {
    std::fs::create_dir_all(dir)?;
    match name {
        TABLE_FIXTURE => {
            let n = 1500;
            let prompts = dir.join("prompts.jsonl");
            write_prompts(&prompts, n)?;
            let (sae_a, sae_b) = write_sae_dumps(dir, seed, n)?;
            let kl_dir = write_kl_dumps(dir)?;
            Ok(Some(FixtureInputs {
                prompts,
                n_prompts: n,
                sae_dump_a: Some(sae_a),
                sae_dump_b: Some(sae_b),
                kl_dump_dir: Some(kl_dir),
            }))
        }
        LENGTH_FIXTURE => {
            let n = 300;
            let prompts = dir.join("prompts.jsonl");
            write_prompts(&prompts, n)?;
            Ok(Some(FixtureInputs {
                prompts,
                n_prompts: n,
                sae_dump_a: None,
                sae_dump_b: None,
                kl_dump_dir: None,
            }))
        }
        _ => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Gateway, GenerationConfig};

    #[test]
    fn table_fixture_injects_at_target_rate() {
        let spec = build(TABLE_FIXTURE, 7).unwrap();
        let gen = GenerationConfig::default();
        let mut tables = 0;
        let n = 1500;
        for i in 1..=n {
            let req = ChatRequest::new("tabled", prompt_text(i), gen.clone());
            let text = spec.backend.chat(&req).unwrap();
            if has_table(text.text()) {
                tables += 1;
            }
            let plain = ChatRequest::new("plain", prompt_text(i), gen.clone());
            assert!(!has_table(spec.backend.chat(&plain).unwrap().text()));
        }
        let rate = tables as f64 / n as f64;
        assert!((0.09..=0.15).contains(&rate), "rate {rate}");
    }

    #[test]
    fn length_fixture_separates_token_counts() {
        let spec = build(LENGTH_FIXTURE, 7).unwrap();
        let gen = GenerationConfig::default();
        for i in 1..=20 {
            let short = spec
                .backend
                .chat(&ChatRequest::new("short", prompt_text(i), gen.clone()))
                .unwrap();
            let long = spec
                .backend
                .chat(&ChatRequest::new("long", prompt_text(i), gen.clone()))
                .unwrap();
            let (n_s, n_l) = (token_count(short.text()), token_count(long.text()));
            assert!((60..=80).contains(&n_s), "short {n_s}");
            assert!((470..=530).contains(&n_l), "long {n_l}");
        }
    }

    #[test]
    fn unknown_fixture_is_none() {
        assert!(build("nope", 1).is_none());
        let dir = tempfile::tempdir().unwrap();
        assert!(materialize_inputs("nope", 1, dir.path()).unwrap().is_none());
    }
}

//! Versioned prompt templates and placeholder rendering.
//!
//! Templates ship with the crate and can be overridden per-run from a
//! directory of `<name>.txt` files. Rendering uses format-string semantics:
//! `{name}` substitutes a variable, `{{` and `}}` are literal braces.
//! System templates carry no placeholders and are used verbatim.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Corrective suffix appended to the user message when a model's output
/// failed to parse and the call is retried once.
pub const FORMAT_REPROMPT: &str =
    "\n\nYour previous reply was not in the required format. Return ONLY the requested output \
     format, with no extra text.";

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("unknown template: {0}")]
    UnknownTemplate(String),
    #[error("unknown placeholder {{{0}}}")]
    UnknownPlaceholder(String),
    #[error("unmatched brace at byte {0}")]
    UnmatchedBrace(usize),
    #[error("failed to read template override {path}: {message}")]
    OverrideRead { path: String, message: String },
}

macro_rules! builtin_templates {
    ($(($name:literal, $file:literal)),* $(,)?) => {
        /// Every template name known to the pipeline.
        pub const TEMPLATE_NAMES: &[&str] = &[$($name),*];

        fn builtin(name: &str) -> Option<&'static str> {
            match name {
                $($name => Some(include_str!($file)),)*
                _ => None,
            }
        }
    };
}

builtin_templates![
    ("judge_system", "../prompts/judge_system.txt"),
    ("judge_user", "../prompts/judge_user.txt"),
    ("rater_interestingness_system", "../prompts/rater_interestingness_system.txt"),
    ("rater_interestingness_user", "../prompts/rater_interestingness_user.txt"),
    ("rater_abstraction_system", "../prompts/rater_abstraction_system.txt"),
    ("rater_abstraction_user", "../prompts/rater_abstraction_user.txt"),
    ("extract_differences", "../prompts/extract_differences.txt"),
    ("summarize_cluster", "../prompts/summarize_cluster.txt"),
    ("relabel_feature", "../prompts/relabel_feature.txt"),
    ("summarize_features", "../prompts/summarize_features.txt"),
    ("adjust_phrasing", "../prompts/adjust_phrasing.txt"),
    ("fork_hypotheses", "../prompts/fork_hypotheses.txt"),
];

/// The active template set for a run.
#[derive(Debug, Clone)]
pub struct PromptTemplates {
    overrides: BTreeMap<String, String>,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self::builtin()
    }
}

impl PromptTemplates {
    /// The templates compiled into the crate.
    pub fn builtin() -> Self {
        Self {
            overrides: BTreeMap::new(),
        }
    }

    /// Builtin templates with any `<name>.txt` files found in `dir` taking
    /// precedence.
    pub fn with_overrides(dir: &Path) -> Result<Self, TemplateError> {
        let mut overrides = BTreeMap::new();
        for name in TEMPLATE_NAMES {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                let content =
                    std::fs::read_to_string(&path).map_err(|e| TemplateError::OverrideRead {
                        path: path.display().to_string(),
                        message: e.to_string(),
                    })?;
                overrides.insert(name.to_string(), content);
            }
        }
        Ok(Self { overrides })
    }

    pub fn get(&self, name: &str) -> Result<&str, TemplateError> {
        if let Some(content) = self.overrides.get(name) {
            return Ok(content);
        }
        builtin(name).ok_or_else(|| TemplateError::UnknownTemplate(name.to_string()))
    }

    /// Renders a template with the given variables.
    pub fn render(&self, name: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
        render(self.get(name)?, vars)
    }

    /// Content hash recorded in the run manifest.
    pub fn hash(&self, name: &str) -> Result<String, TemplateError> {
        let content = self.get(name)?;
        let mut hasher = Sha256::new();
        hasher.update(content.as_bytes());
        Ok(hex::encode(&hasher.finalize()[..8]))
    }

    pub fn hashes(&self) -> BTreeMap<String, String> {
        TEMPLATE_NAMES
            .iter()
            .map(|name| (name.to_string(), self.hash(name).expect("builtin exists")))
            .collect()
    }
}

/// Substitutes `{name}` placeholders; `{{` and `}}` emit literal braces.
pub fn render(template: &str, vars: &[(&str, &str)]) -> Result<String, TemplateError> {
    let mut out = String::with_capacity(template.len());
    let bytes = template.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        match bytes[i] {
            b'{' => {
                if bytes.get(i + 1) == Some(&b'{') {
                    out.push('{');
                    i += 2;
                    continue;
                }
                let end = template[i + 1..]
                    .find('}')
                    .map(|offset| i + 1 + offset)
                    .ok_or(TemplateError::UnmatchedBrace(i))?;
                let key = &template[i + 1..end];
                let value = vars
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, v)| *v)
                    .ok_or_else(|| TemplateError::UnknownPlaceholder(key.to_string()))?;
                out.push_str(value);
                i = end + 1;
            }
            b'}' => {
                if bytes.get(i + 1) == Some(&b'}') {
                    out.push('}');
                    i += 2;
                    continue;
                }
                return Err(TemplateError::UnmatchedBrace(i));
            }
            _ => {
                let ch_len = template[i..].chars().next().map(char::len_utf8).unwrap_or(1);
                out.push_str(&template[i..i + ch_len]);
                i += ch_len;
            }
        }
    }
    Ok(out)
}

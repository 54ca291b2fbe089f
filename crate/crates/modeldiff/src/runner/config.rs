//! Run configuration: a TOML file of sections plus CLI overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::RunnerError;

fn default_parallelism() -> usize {
    4
}
fn default_max_new_tokens() -> usize {
    1024
}
fn default_pca_components() -> usize {
    128
}
fn default_min_cluster_size() -> usize {
    8
}
fn default_direction_threshold() -> f64 {
    0.65
}
fn default_n_candidates() -> usize {
    100
}
fn default_n_hypotheses() -> usize {
    40
}
fn default_examples() -> usize {
    5
}
fn default_batch_size() -> usize {
    10
}
fn default_top_n_forks() -> usize {
    5
}
fn default_n_completions() -> usize {
    20
}
fn default_fork_temperature() -> f64 {
    1.0
}
fn default_fork_max_tokens() -> usize {
    64
}
fn default_max_attempts() -> u32 {
    4
}
fn default_stages() -> Vec<String> {
    super::Stage::ALL.iter().map(|s| s.name().to_string()).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelsConfig {
    pub a: String,
    pub b: String,
}

impl Default for ModelsConfig {
    fn default() -> Self {
        Self {
            a: "model-a".into(),
            b: "model-b".into(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PathsConfig {
    pub prompts: Option<PathBuf>,
    pub sae_dump_a: Option<PathBuf>,
    pub sae_dump_b: Option<PathBuf>,
    /// Directory of `<triplet_id>.jsonl` paired logprob dumps.
    pub kl_dump_dir: Option<PathBuf>,
    /// Directory of prompt-template overrides.
    pub templates_dir: Option<PathBuf>,
    /// Response cache directory (live gateway only).
    pub cache_dir: Option<PathBuf>,
    /// Precomputed reduced embeddings (external reduction hook).
    pub reduced_embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    /// "mock", "live", or "fixture".
    pub mode: String,
    /// Built-in fixture name when mode = "fixture".
    pub fixture: Option<String>,
    /// Script file when mode = "mock".
    pub mock_script: Option<PathBuf>,
    pub base_url: Option<String>,
    pub embed_base_url: Option<String>,
    pub embed_model: Option<String>,
    /// Environment variable holding the API key.
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
    #[serde(default)]
    pub min_request_interval_ms: u64,
    #[serde(default)]
    pub supports_assistant_prefill: bool,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            mode: "mock".into(),
            fixture: None,
            mock_script: None,
            base_url: None,
            embed_base_url: None,
            embed_model: None,
            api_key_env: None,
            max_attempts: default_max_attempts(),
            min_request_interval_ms: 0,
            supports_assistant_prefill: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolesConfig {
    pub extractor: String,
    pub summarizer: String,
    pub relabeler: String,
    pub rewriter: String,
    pub judge: String,
    pub fork_generator: String,
    pub raters: Vec<String>,
}

impl Default for RolesConfig {
    fn default() -> Self {
        Self {
            extractor: "extractor".into(),
            summarizer: "summarizer".into(),
            relabeler: "relabeler".into(),
            rewriter: "rewriter".into(),
            judge: "judge".into(),
            fork_generator: "fork-generator".into(),
            raters: vec!["rater-1".into(), "rater-2".into(), "rater-3".into()],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CollectConfig {
    pub n_generation: usize,
    pub n_heldout: usize,
    #[serde(default = "default_max_new_tokens")]
    pub max_new_tokens: usize,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            n_generation: 1000,
            n_heldout: 500,
            max_new_tokens: default_max_new_tokens(),
            temperature: 0.0,
            parallelism: default_parallelism(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffLlmConfig {
    #[serde(default = "default_pca_components")]
    pub pca_components: usize,
    #[serde(default = "default_min_cluster_size")]
    pub min_cluster_size: usize,
    pub min_samples: Option<usize>,
    #[serde(default = "default_direction_threshold")]
    pub direction_threshold: f64,
}

impl Default for DiffLlmConfig {
    fn default() -> Self {
        Self {
            pca_components: default_pca_components(),
            min_cluster_size: default_min_cluster_size(),
            min_samples: None,
            direction_threshold: default_direction_threshold(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffSaeConfig {
    #[serde(default = "default_n_candidates")]
    pub n_candidates: usize,
    #[serde(default = "default_n_hypotheses")]
    pub n_hypotheses: usize,
    #[serde(default = "default_examples")]
    pub positive_examples: usize,
    #[serde(default = "default_examples")]
    pub negative_examples: usize,
}

impl Default for DiffSaeConfig {
    fn default() -> Self {
        Self {
            n_candidates: default_n_candidates(),
            n_hypotheses: default_n_hypotheses(),
            positive_examples: default_examples(),
            negative_examples: default_examples(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JudgeConfig {
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl Default for JudgeConfig {
    fn default() -> Self {
        Self {
            batch_size: default_batch_size(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KlForkConfig {
    #[serde(default = "default_top_n_forks")]
    pub top_n_forks: usize,
    #[serde(default = "default_n_completions")]
    pub n_completions: usize,
    #[serde(default = "default_fork_temperature")]
    pub temperature: f64,
    #[serde(default = "default_fork_max_tokens")]
    pub max_tokens: usize,
    /// KL-derived hypotheses stay out of the metric comparison unless
    /// asked for.
    #[serde(default)]
    pub include_in_report: bool,
}

impl Default for KlForkConfig {
    fn default() -> Self {
        Self {
            top_n_forks: default_top_n_forks(),
            n_completions: default_n_completions(),
            temperature: default_fork_temperature(),
            max_tokens: default_fork_max_tokens(),
            include_in_report: false,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ReportConfig {
    pub min_f: Option<f64>,
    pub min_acc: Option<f64>,
    pub min_interestingness: Option<f64>,
    pub abstraction_min: Option<f64>,
    pub abstraction_max: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    #[serde(default = "default_stages")]
    pub stages: Vec<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            stages: default_stages(),
        }
    }
}

/// The full run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub run_dir: PathBuf,
    #[serde(default)]
    pub models: ModelsConfig,
    #[serde(default)]
    pub paths: PathsConfig,
    #[serde(default)]
    pub gateway: GatewayConfig,
    #[serde(default)]
    pub roles: RolesConfig,
    #[serde(default)]
    pub collect: CollectConfig,
    #[serde(default)]
    pub diff_llm: DiffLlmConfig,
    #[serde(default)]
    pub diff_sae: DiffSaeConfig,
    #[serde(default)]
    pub judge: JudgeConfig,
    #[serde(default)]
    pub kl_fork: KlForkConfig,
    #[serde(default)]
    pub report: ReportConfig,
    #[serde(default)]
    pub run: RunSection,
}

impl RunConfig {
    /// Parses a TOML config file. Relative paths are resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, RunnerError> {
        let text = std::fs::read_to_string(path).map_err(|e| RunnerError::Config {
            message: format!("read {}: {e}", path.display()),
        })?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| RunnerError::Config {
            message: format!("{}: {e}", path.display()),
        })?;
        if let Some(base) = path.parent() {
            config.resolve_paths(base);
        }
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        resolve(&mut self.run_dir);
        for opt in [
            &mut self.paths.prompts,
            &mut self.paths.sae_dump_a,
            &mut self.paths.sae_dump_b,
            &mut self.paths.kl_dump_dir,
            &mut self.paths.templates_dir,
            &mut self.paths.cache_dir,
            &mut self.paths.reduced_embeddings,
        ] {
            if let Some(p) = opt.as_mut() {
                resolve(p);
            }
        }
        if let Some(p) = self.gateway.mock_script.as_mut() {
            resolve(p);
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: PathBuf::from("run"),
            models: ModelsConfig::default(),
            paths: PathsConfig::default(),
            gateway: GatewayConfig::default(),
            roles: RolesConfig::default(),
            collect: CollectConfig::default(),
            diff_llm: DiffLlmConfig::default(),
            diff_sae: DiffSaeConfig::default(),
            judge: JudgeConfig::default(),
            kl_fork: KlForkConfig::default(),
            report: ReportConfig::default(),
            run: RunSection::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            r#"
seed = 7
run_dir = "runs/demo"

[models]
a = "stable"
b = "preview"

[paths]
prompts = "prompts.jsonl"

[gateway]
mode = "fixture"
fixture = "table"

[diff_llm]
min_cluster_size = 10
direction_threshold = 0.7

[report]
min_f = 0.05
"#,
        )
        .unwrap();
        let config = RunConfig::load(&path).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.models.a, "stable");
        assert_eq!(config.run_dir, dir.path().join("runs/demo"));
        assert_eq!(config.paths.prompts, Some(dir.path().join("prompts.jsonl")));
        assert_eq!(config.diff_llm.min_cluster_size, 10);
        assert_eq!(config.diff_llm.direction_threshold, 0.7);
        assert_eq!(config.report.min_f, Some(0.05));
        // untouched sections default
        assert_eq!(config.judge.batch_size, 10);
        assert_eq!(config.diff_sae.n_hypotheses, 40);
        assert_eq!(config.collect.max_new_tokens, 1024);
        assert_eq!(config.kl_fork.n_completions, 20);
        assert_eq!(config.run.stages.len(), 8);
    }

    #[test]
    fn rejects_malformed_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "run_dir = [not toml").unwrap();
        assert!(RunConfig::load(&path).is_err());
    }
}

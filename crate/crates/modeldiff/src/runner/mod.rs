//! Stage-based run orchestration.
//!
//! Each stage reads the previous stages' line-delimited JSON artifacts from
//! the run directory, writes its own, and updates the manifest with content
//! hashes. Reruns with identical inputs and a mock gateway are
//! byte-identical.

pub mod config;
pub mod manifest;
pub mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{self, Triplet};
use crate::diff_llm::{self, LlmPipelineConfig};
use crate::diff_sae;
use crate::gateway::cache::ResponseCache;
use crate::gateway::live::{LiveBackend, LiveConfig};
use crate::gateway::mock::{MockBackend, MockScript};
use crate::gateway::{fixtures, Gateway};
use crate::hypothesis::{Hypothesis, Method};
use crate::judge::{self, JudgeFailure, Verdict};
use crate::jsonl;
use crate::kl_fork::{self, ForkPoint};
use crate::metrics::{self, AcceptanceReport, HypothesisEval, RaterScore, RatingDimension};
use crate::prompts::PromptTemplates;
use config::RunConfig;
use manifest::RunManifest;
use report::{FilterCriteria, ReportRow};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("config error: {message}")]
    Config { message: String },
    #[error("missing artifact {file}: run `{stage}` first")]
    MissingArtifact { file: String, stage: &'static str },
    #[error("unknown stage: {0}")]
    UnknownStage(String),
    #[error("unknown fixture: {0}")]
    UnknownFixture(String),
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error(transparent)]
    Jsonl(#[from] jsonl::JsonlError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    DiffLlm(#[from] diff_llm::DiffLlmError),
    #[error(transparent)]
    Sae(#[from] diff_sae::SaeError),
    #[error(transparent)]
    Judge(#[from] judge::JudgeError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Kl(#[from] kl_fork::KlError),
    #[error(transparent)]
    Gateway(#[from] crate::gateway::GatewayError),
    #[error(transparent)]
    Template(#[from] crate::prompts::TemplateError),
}

/// The pipeline stages, in their natural order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Collect,
    DiffLlm,
    DiffSae,
    JudgeGen,
    JudgeHeldout,
    Rate,
    KlFork,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Collect,
        Stage::DiffLlm,
        Stage::DiffSae,
        Stage::JudgeGen,
        Stage::JudgeHeldout,
        Stage::Rate,
        Stage::KlFork,
        Stage::Report,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::DiffLlm => "diff-llm",
            Stage::DiffSae => "diff-sae",
            Stage::JudgeGen => "judge-gen",
            Stage::JudgeHeldout => "judge-heldout",
            Stage::Rate => "rate",
            Stage::KlFork => "kl-fork",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, RunnerError> {
        Stage::ALL
            .iter()
            .find(|s| s.name() == name)
            .copied()
            .ok_or_else(|| RunnerError::UnknownStage(name.to_string()))
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

// Artifact file names.
pub const GENERATION_FILE: &str = "generation.jsonl";
pub const HELDOUT_FILE: &str = "heldout.jsonl";
pub const SKIPPED_FILE: &str = "skipped.jsonl";
pub const DIFFERENCES_FILE: &str = "differences.jsonl";
pub const HYPOTHESES_LLM_FILE: &str = "hypotheses_llm.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const HYPOTHESES_SAE_FILE: &str = "hypotheses_sae.jsonl";
pub const VERDICTS_GEN_FILE: &str = "verdicts_gen.jsonl";
pub const FAILURES_GEN_FILE: &str = "judge_failures_gen.jsonl";
pub const ACCEPTANCE_FILE: &str = "acceptance.json";
pub const VERDICTS_HELDOUT_FILE: &str = "verdicts_heldout.jsonl";
pub const FAILURES_HELDOUT_FILE: &str = "judge_failures_heldout.jsonl";
pub const RATINGS_FILE: &str = "ratings.jsonl";
pub const FORKS_FILE: &str = "forks.jsonl";
pub const HYPOTHESES_KL_FILE: &str = "hypotheses_kl.jsonl";
pub const EVAL_FILE: &str = "eval.jsonl";
pub const REPORT_FILE: &str = "report.jsonl";
pub const REPORT_FILTERED_FILE: &str = "report_filtered.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RESPONSE_STATS_FILE: &str = "response_stats.json";

/// Stable sub-seed derivation for per-call randomness (judge swaps).
pub fn derive_seed(base: u64, parts: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base.to_le_bytes());
    for part in parts {
        hasher.update(part.as_bytes());
        hasher.update([0x1f]);
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Acceptance artifacts: the overall report plus one per method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AcceptanceArtifact {
    pub overall: AcceptanceReport,
    pub per_method: BTreeMap<String, AcceptanceReport>,
}

/// Fork report line: the fork point plus the completion sets drawn there.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForkReport {
    #[serde(flatten)]
    pub fork: ForkPoint,
    pub completions_model1: Vec<String>,
    pub completions_model2: Vec<String>,
}

/// Response texts looked up by prompt id, one map per model side.
type ResponseTexts = (BTreeMap<String, String>, BTreeMap<String, String>);

/// Mean whitespace-token response lengths per model, an auxiliary check on
/// length-difference hypotheses.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResponseStats {
    pub model_a: String,
    pub model_b: String,
    pub mean_tokens_a: f64,
    pub mean_tokens_b: f64,
    pub n_triplets: usize,
}

pub struct Runner {
    pub config: RunConfig,
    gateway: Arc<dyn Gateway>,
    templates: PromptTemplates,
    manifest: RunManifest,
}

fn build_gateway(config: &RunConfig) -> Result<Arc<dyn Gateway>, RunnerError> {
    match config.gateway.mode.as_str() {
        "mock" => {
            let mut backend = MockBackend::new().with_embed_seed(config.seed);
            if let Some(script_path) = &config.gateway.mock_script {
                backend = backend.with_script(MockScript::load(script_path)?);
            }
            Ok(Arc::new(backend))
        }
        "fixture" => {
            let name = config.gateway.fixture.as_deref().ok_or(RunnerError::Config {
                message: "gateway.mode = \"fixture\" requires gateway.fixture".into(),
            })?;
            let spec = fixtures::build(name, config.seed)
                .ok_or_else(|| RunnerError::UnknownFixture(name.to_string()))?;
            Ok(Arc::new(spec.backend))
        }
        "live" => {
            let base_url = config.gateway.base_url.clone().ok_or(RunnerError::Config {
                message: "gateway.mode = \"live\" requires gateway.base_url".into(),
            })?;
            let api_key = config
                .gateway
                .api_key_env
                .as_deref()
                .and_then(|var| std::env::var(var).ok());
            let live_config = LiveConfig {
                base_url,
                embed_base_url: config.gateway.embed_base_url.clone(),
                embed_model: config
                    .gateway
                    .embed_model
                    .clone()
                    .unwrap_or_else(|| "text-embedding-3-small".into()),
                api_key,
                max_attempts: config.gateway.max_attempts,
                min_request_interval: std::time::Duration::from_millis(
                    config.gateway.min_request_interval_ms,
                ),
                supports_assistant_prefill: config.gateway.supports_assistant_prefill,
                ..LiveConfig::default()
            };
            let mut backend = LiveBackend::new(live_config)?;
            if let Some(cache_dir) = &config.paths.cache_dir {
                backend = backend.with_cache(ResponseCache::new(cache_dir)?);
            }
            Ok(Arc::new(backend))
        }
        other => Err(RunnerError::Config {
            message: format!("unknown gateway mode {other:?}"),
        }),
    }
}

impl Runner {
    pub fn new(config: RunConfig) -> Result<Self, RunnerError> {
        let gateway = build_gateway(&config)?;
        Self::with_gateway(config, gateway)
    }

    /// Uses a caller-supplied gateway (tests and embedded use).
    pub fn with_gateway(config: RunConfig, gateway: Arc<dyn Gateway>) -> Result<Self, RunnerError> {
        let templates = match &config.paths.templates_dir {
            Some(dir) => PromptTemplates::with_overrides(dir)?,
            None => PromptTemplates::builtin(),
        };
        std::fs::create_dir_all(&config.run_dir).map_err(|e| RunnerError::Io {
            path: config.run_dir.display().to_string(),
            message: e.to_string(),
        })?;
        let manifest =
            RunManifest::load_or_new(&config.run_dir, config.clone(), templates.hashes());
        Ok(Self {
            config,
            gateway,
            templates,
            manifest,
        })
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn run_dir(&self) -> &Path {
        &self.config.run_dir
    }

    fn artifact_path(&self, file: &str) -> PathBuf {
        self.run_dir().join(file)
    }

    fn require_artifact(&self, file: &str, produced_by: Stage) -> Result<PathBuf, RunnerError> {
        let path = self.artifact_path(file);
        if !path.exists() {
            return Err(RunnerError::MissingArtifact {
                file: file.to_string(),
                stage: produced_by.name(),
            });
        }
        Ok(path)
    }

    /// Runs one stage and updates the manifest.
    pub fn run(&mut self, stage: Stage) -> Result<(), RunnerError> {
        log::info!("running stage {stage}");
        let (artifacts, warnings) = match stage {
            Stage::Collect => self.stage_collect()?,
            Stage::DiffLlm => self.stage_diff_llm()?,
            Stage::DiffSae => self.stage_diff_sae()?,
            Stage::JudgeGen => self.stage_judge(true)?,
            Stage::JudgeHeldout => self.stage_judge(false)?,
            Stage::Rate => self.stage_rate()?,
            Stage::KlFork => self.stage_kl_fork()?,
            Stage::Report => self.stage_report()?,
        };
        let run_dir = self.run_dir().to_path_buf();
        self.manifest
            .complete_stage(&run_dir, stage.name(), &artifacts, warnings)?;
        self.manifest.save(&run_dir)?;
        Ok(())
    }

    /// Runs every stage listed in the config, in order.
    pub fn run_pipeline(&mut self) -> Result<(), RunnerError> {
        let stages: Vec<Stage> = self
            .config
            .run
            .stages
            .iter()
            .map(|name| Stage::from_name(name))
            .collect::<Result<_, _>>()?;
        for stage in stages {
            self.run(stage)?;
        }
        Ok(())
    }

    // ----- stage: collect -----

    fn stage_collect(&mut self) -> Result<(Vec<String>, Vec<String>), RunnerError> {
        let prompts_path = self.config.paths.prompts.clone().ok_or(RunnerError::Config {
            message: "paths.prompts is required for collect".into(),
        })?;
        let prompts = corpus::load_prompts(&prompts_path, None)?;
        let gen = crate::gateway::GenerationConfig {
            max_new_tokens: self.config.collect.max_new_tokens,
            temperature: self.config.collect.temperature,
            top_logprobs: None,
            n_samples: 1,
        };
        let outcome = corpus::collect_pairs(
            self.gateway.as_ref(),
            &prompts,
            &self.config.models.a,
            &self.config.models.b,
            &gen,
            self.config.collect.parallelism,
        )?;
        let mut warnings: Vec<String> = outcome
            .skipped
            .iter()
            .map(|s| format!("skipped prompt {}: {}", s.prompt_id, s.error))
            .collect();
        let split = corpus::split_corpus(
            outcome.triplets,
            self.config.collect.n_generation,
            self.config.collect.n_heldout,
            self.config.seed,
        )?;
        if !outcome.skipped.is_empty() {
            warnings.push(format!(
                "{} prompt(s) skipped; metric denominators reflect collected triplets only",
                outcome.skipped.len()
            ));
        }
        jsonl::write_all(&self.artifact_path(GENERATION_FILE), &split.generation)?;
        jsonl::write_all(&self.artifact_path(HELDOUT_FILE), &split.heldout)?;
        jsonl::write_all(&self.artifact_path(SKIPPED_FILE), &outcome.skipped)?;

        self.manifest.counts.prompts = prompts.len();
        self.manifest.counts.triplets = split.generation.len() + split.heldout.len();
        self.manifest.counts.skipped_prompts = outcome.skipped.len();
        Ok((
            vec![
                GENERATION_FILE.to_string(),
                HELDOUT_FILE.to_string(),
                SKIPPED_FILE.to_string(),
            ],
            warnings,
        ))
    }

    // ----- stage: diff-llm -----

    fn load_external_reduction(&self) -> Result<Option<Vec<Vec<f64>>>, RunnerError> {
        match &self.config.paths.reduced_embeddings {
            Some(path) => {
                let rows: Vec<Vec<f64>> = jsonl::read_all(path)?;
                Ok(Some(rows))
            }
            None => Ok(None),
        }
    }

    fn stage_diff_llm(&mut self) -> Result<(Vec<String>, Vec<String>), RunnerError> {
        let generation_path = self.require_artifact(GENERATION_FILE, Stage::Collect)?;
        let triplets: Vec<Triplet> = jsonl::read_all(&generation_path)?;
        let pipeline_config = LlmPipelineConfig {
            extractor_model: self.config.roles.extractor.clone(),
            summarizer_model: self.config.roles.summarizer.clone(),
            pca_components: self.config.diff_llm.pca_components,
            min_cluster_size: self.config.diff_llm.min_cluster_size,
            min_samples: self.config.diff_llm.min_samples,
            direction_threshold: self.config.diff_llm.direction_threshold,
            parallelism: self.config.collect.parallelism,
        };
        let external = self.load_external_reduction()?;
        let output = diff_llm::run_llm_pipeline(
            self.gateway.as_ref(),
            &self.templates,
            &pipeline_config,
            &triplets,
            external,
        )?;
        jsonl::write_all(&self.artifact_path(DIFFERENCES_FILE), &output.differences)?;
        jsonl::write_all(&self.artifact_path(HYPOTHESES_LLM_FILE), &output.hypotheses)?;
        Ok((
            vec![DIFFERENCES_FILE.to_string(), HYPOTHESES_LLM_FILE.to_string()],
            output.warnings,
        ))
    }

    // ----- stage: diff-sae -----

    fn response_text_lookup(&self) -> Result<ResponseTexts, RunnerError> {
        let mut by_id_a = BTreeMap::new();
        let mut by_id_b = BTreeMap::new();
        for file in [GENERATION_FILE, HELDOUT_FILE] {
            let path = self.artifact_path(file);
            if path.exists() {
                let triplets: Vec<Triplet> = jsonl::read_all(&path)?;
                for t in triplets {
                    by_id_a.insert(t.prompt_id.clone(), t.response_a);
                    by_id_b.insert(t.prompt_id, t.response_b);
                }
            }
        }
        Ok((by_id_a, by_id_b))
    }

    fn stage_diff_sae(&mut self) -> Result<(Vec<String>, Vec<String>), RunnerError> {
        let dump_a_path = self.config.paths.sae_dump_a.clone().ok_or(RunnerError::Config {
            message: "paths.sae_dump_a is required for diff-sae".into(),
        })?;
        let dump_b_path = self.config.paths.sae_dump_b.clone().ok_or(RunnerError::Config {
            message: "paths.sae_dump_b is required for diff-sae".into(),
        })?;
        self.require_artifact(GENERATION_FILE, Stage::Collect)?;

        let mut warnings = Vec::new();
        let dump_a = diff_sae::load_activations(&dump_a_path)?;
        let dump_b = diff_sae::load_activations(&dump_b_path)?;
        let pooled_a = diff_sae::pool_completion(&dump_a);
        let pooled_b = diff_sae::pool_completion(&dump_b);
        let stats = diff_sae::feature_frequency_diff(&pooled_a, &pooled_b)?;
        let mut candidates = diff_sae::select_candidates(&stats, self.config.diff_sae.n_candidates);

        let (texts_a, texts_b) = self.response_text_lookup()?;
        for candidate in &mut candidates {
            let feature = candidate.stats.feature_id;
            // examples come from the side where the feature is more active
            let (pooled, texts) = match candidate.direction {
                crate::hypothesis::Direction::A => (&pooled_a, &texts_a),
                crate::hypothesis::Direction::B => (&pooled_b, &texts_b),
            };
            let mut active: Vec<(usize, f64)> = pooled
                .active_texts(feature)
                .into_iter()
                .map(|t| (t, pooled.values[&(feature, t)]))
                .collect();
            active.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let resolve = |idx: usize| -> String {
                let id = &pooled.text_ids[idx];
                texts.get(id).cloned().unwrap_or_else(|| id.clone())
            };
            let positives: Vec<String> = active
                .iter()
                .take(self.config.diff_sae.positive_examples)
                .map(|(t, _)| resolve(*t))
                .collect();
            let active_set: std::collections::BTreeSet<usize> =
                active.iter().map(|(t, _)| *t).collect();
            let negatives: Vec<String> = (0..pooled.n_texts())
                .filter(|t| !active_set.contains(t))
                .take(self.config.diff_sae.negative_examples)
                .map(resolve)
                .collect();
            if positives.is_empty() {
                warnings.push(format!(
                    "feature {feature}: no activating texts; kept unlabeled"
                ));
                continue;
            }
            if let Some(w) = diff_sae::relabel_feature(
                self.gateway.as_ref(),
                &self.templates,
                &self.config.roles.relabeler,
                &mut candidate.stats,
                &positives,
                &negatives,
            )? {
                warnings.push(w);
            }
        }
        jsonl::write_all(&self.artifact_path(CANDIDATES_FILE), &candidates)?;

        let hypotheses = diff_sae::summarize_to_hypotheses(
            self.gateway.as_ref(),
            &self.templates,
            &self.config.roles.summarizer,
            &candidates,
            self.config.diff_sae.n_hypotheses,
        )?;
        let mut adjusted = Vec::with_capacity(hypotheses.len());
        for hypothesis in &hypotheses {
            let (h, warning) = diff_sae::adjust_phrasing(
                self.gateway.as_ref(),
                &self.templates,
                &self.config.roles.rewriter,
                hypothesis,
            )?;
            if let Some(w) = warning {
                warnings.push(w);
            }
            adjusted.push(h);
        }
        jsonl::write_all(&self.artifact_path(HYPOTHESES_SAE_FILE), &adjusted)?;
        Ok((
            vec![CANDIDATES_FILE.to_string(), HYPOTHESES_SAE_FILE.to_string()],
            warnings,
        ))
    }

    // ----- stages: judge-gen / judge-heldout -----

    fn load_hypotheses(&self, include_kl: bool) -> Result<Vec<Hypothesis>, RunnerError> {
        let mut all = Vec::new();
        for (file, wanted) in [
            (HYPOTHESES_LLM_FILE, true),
            (HYPOTHESES_SAE_FILE, true),
            (HYPOTHESES_KL_FILE, include_kl),
        ] {
            let path = self.artifact_path(file);
            if wanted && path.exists() {
                let hypotheses: Vec<Hypothesis> = jsonl::read_all(&path)?;
                all.extend(hypotheses);
            }
        }
        Ok(all)
    }

    fn stage_judge(&mut self, generation_pass: bool) -> Result<(Vec<String>, Vec<String>), RunnerError> {
        let include_kl = self.config.kl_fork.include_in_report;
        let (triplet_file, triplet_stage, purpose) = if generation_pass {
            (GENERATION_FILE, Stage::Collect, "judge-gen")
        } else {
            (HELDOUT_FILE, Stage::Collect, "judge-heldout")
        };
        let triplets: Vec<Triplet> =
            jsonl::read_all(&self.require_artifact(triplet_file, triplet_stage)?)?;

        let hypotheses = if generation_pass {
            let all = self.load_hypotheses(include_kl)?;
            if all.is_empty() {
                return Err(RunnerError::MissingArtifact {
                    file: HYPOTHESES_LLM_FILE.to_string(),
                    stage: Stage::DiffLlm.name(),
                });
            }
            all
        } else {
            // held-out judging covers only hypotheses that passed the
            // generation-set acceptance filter
            let acceptance_path = self.require_artifact(ACCEPTANCE_FILE, Stage::JudgeGen)?;
            let artifact: AcceptanceArtifact = read_json(&acceptance_path)?;
            let accepted: std::collections::BTreeSet<String> =
                artifact.overall.accepted_ids.into_iter().collect();
            self.load_hypotheses(include_kl)?
                .into_iter()
                .filter(|h| accepted.contains(&h.id))
                .collect()
        };

        let batch_size = self.config.judge.batch_size.clamp(1, judge::MAX_BATCH);
        let mut verdicts: Vec<Verdict> = Vec::new();
        let mut failures: Vec<JudgeFailure> = Vec::new();
        let mut warnings = Vec::new();
        if hypotheses.is_empty() {
            warnings.push("no hypotheses to judge".to_string());
        } else {
            for triplet in &triplets {
                for (chunk_idx, chunk) in hypotheses.chunks(batch_size).enumerate() {
                    let seed = derive_seed(
                        self.config.seed,
                        &[purpose, &triplet.prompt_id, &chunk_idx.to_string()],
                    );
                    let outcome = judge::judge_batch(
                        self.gateway.as_ref(),
                        &self.templates,
                        &self.config.roles.judge,
                        chunk,
                        triplet,
                        seed,
                    )?;
                    verdicts.extend(outcome.verdicts);
                    failures.extend(outcome.failures);
                }
            }
        }
        if !failures.is_empty() {
            warnings.push(format!(
                "{} judge label(s) failed to parse; excluded from metric denominators",
                failures.len()
            ));
        }
        if generation_pass {
            self.manifest.counts.hypotheses = hypotheses.len();
        }

        let mut artifact_files = Vec::new();
        if generation_pass {
            jsonl::write_all(&self.artifact_path(VERDICTS_GEN_FILE), &verdicts)?;
            jsonl::write_all(&self.artifact_path(FAILURES_GEN_FILE), &failures)?;
            let overall = metrics::acceptance(&hypotheses, &verdicts)?;
            let mut per_method = BTreeMap::new();
            for method in [Method::Llm, Method::Sae, Method::Kl] {
                let of_method: Vec<Hypothesis> = hypotheses
                    .iter()
                    .filter(|h| h.method == method)
                    .cloned()
                    .collect();
                if !of_method.is_empty() {
                    per_method
                        .insert(method.to_string(), metrics::acceptance(&of_method, &verdicts)?);
                }
            }
            write_json(
                &self.artifact_path(ACCEPTANCE_FILE),
                &AcceptanceArtifact { overall, per_method },
            )?;
            artifact_files.extend([
                VERDICTS_GEN_FILE.to_string(),
                FAILURES_GEN_FILE.to_string(),
                ACCEPTANCE_FILE.to_string(),
            ]);
        } else {
            jsonl::write_all(&self.artifact_path(VERDICTS_HELDOUT_FILE), &verdicts)?;
            jsonl::write_all(&self.artifact_path(FAILURES_HELDOUT_FILE), &failures)?;
            artifact_files.extend([
                VERDICTS_HELDOUT_FILE.to_string(),
                FAILURES_HELDOUT_FILE.to_string(),
            ]);
        }
        // recomputed from the files so stage reruns never double-count
        let mut total_verdicts = 0;
        for file in [VERDICTS_GEN_FILE, VERDICTS_HELDOUT_FILE] {
            let path = self.artifact_path(file);
            if path.exists() {
                total_verdicts += jsonl::read_all::<Verdict>(&path)?.len();
            }
        }
        self.manifest.counts.verdicts = total_verdicts;
        Ok((artifact_files, warnings))
    }

    // ----- stage: rate -----

    fn stage_rate(&mut self) -> Result<(Vec<String>, Vec<String>), RunnerError> {
        let acceptance_path = self.require_artifact(ACCEPTANCE_FILE, Stage::JudgeGen)?;
        let artifact: AcceptanceArtifact = read_json(&acceptance_path)?;
        let accepted: std::collections::BTreeSet<String> =
            artifact.overall.accepted_ids.into_iter().collect();
        let hypotheses: Vec<Hypothesis> = self
            .load_hypotheses(self.config.kl_fork.include_in_report)?
            .into_iter()
            .filter(|h| accepted.contains(&h.id))
            .collect();

        let mut warnings = Vec::new();
        let mut ratings: Vec<RaterScore> = Vec::new();
        for hypothesis in &hypotheses {
            for dimension in [RatingDimension::Interestingness, RatingDimension::Abstraction] {
                let score = metrics::rate_hypothesis(
                    self.gateway.as_ref(),
                    &self.templates,
                    hypothesis,
                    dimension,
                    &self.config.roles.raters,
                )?;
                for (rater, reason) in &score.excluded {
                    warnings.push(format!(
                        "hypothesis {}: rater {rater} excluded: {reason}",
                        hypothesis.id
                    ));
                }
                ratings.push(score);
            }
        }
        jsonl::write_all(&self.artifact_path(RATINGS_FILE), &ratings)?;
        Ok((vec![RATINGS_FILE.to_string()], warnings))
    }

    // ----- stage: kl-fork -----

    fn stage_kl_fork(&mut self) -> Result<(Vec<String>, Vec<String>), RunnerError> {
        let dump_dir = self.config.paths.kl_dump_dir.clone().ok_or(RunnerError::Config {
            message: "paths.kl_dump_dir is required for kl-fork".into(),
        })?;
        self.require_artifact(GENERATION_FILE, Stage::Collect)?;
        let (prompts_by_id, _) = self.prompt_lookup()?;

        let mut warnings = Vec::new();
        if self.config.gateway.mode == "live" && !self.config.gateway.supports_assistant_prefill {
            warnings.push(
                "fidelity caveat: provider lacks assistant prefill; fork prefixes are embedded \
                 in the user turn with a continuation instruction"
                    .to_string(),
            );
        }

        let mut dump_files: Vec<PathBuf> = std::fs::read_dir(&dump_dir)
            .map_err(|e| RunnerError::Io {
                path: dump_dir.display().to_string(),
                message: e.to_string(),
            })?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|ext| ext == "jsonl"))
            .collect();
        dump_files.sort();

        // score every position of every response, then keep the global top n
        let mut all_forks: Vec<ForkPoint> = Vec::new();
        for path in &dump_files {
            let triplet_id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let Some(prompt) = prompts_by_id.get(&triplet_id) else {
                warnings.push(format!(
                    "kl dump {triplet_id}: no matching triplet; skipped"
                ));
                continue;
            };
            let paired = kl_fork::load_paired_dump(path)?;
            let forks = kl_fork::find_fork_tokens(
                &triplet_id,
                prompt,
                &paired.tokens,
                &paired.dump1,
                &paired.dump2,
                paired.tokens.len(),
            )?;
            all_forks.extend(forks);
        }
        all_forks.sort_by(|a, b| {
            b.score
                .score
                .partial_cmp(&a.score.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.triplet_id.cmp(&b.triplet_id))
                .then(a.score.position.cmp(&b.score.position))
        });
        all_forks.truncate(self.config.kl_fork.top_n_forks);

        let mut fork_reports = Vec::new();
        let mut hypotheses: Vec<Hypothesis> = Vec::new();
        for fork in &all_forks {
            if fork.response_prefix.is_empty() {
                warnings.push(format!(
                    "fork at {}:{} has an empty prefix; skipped",
                    fork.triplet_id, fork.score.position
                ));
                continue;
            }
            let (c1, c2) = kl_fork::sample_fork_completions(
                self.gateway.as_ref(),
                fork,
                &self.config.models.a,
                &self.config.models.b,
                self.config.kl_fork.n_completions,
                self.config.kl_fork.temperature,
                self.config.kl_fork.max_tokens,
            )?;
            let generated = kl_fork::hypothesize_from_forks(
                self.gateway.as_ref(),
                &self.templates,
                &self.config.roles.fork_generator,
                Some(&self.config.roles.rewriter),
                fork,
                &c1,
                &c2,
            )?;
            for mut h in generated {
                h.id = format!("kl-{:03}", hypotheses.len() + 1);
                hypotheses.push(h);
            }
            fork_reports.push(ForkReport {
                fork: fork.clone(),
                completions_model1: c1,
                completions_model2: c2,
            });
        }
        jsonl::write_all(&self.artifact_path(FORKS_FILE), &fork_reports)?;
        jsonl::write_all(&self.artifact_path(HYPOTHESES_KL_FILE), &hypotheses)?;
        Ok((
            vec![FORKS_FILE.to_string(), HYPOTHESES_KL_FILE.to_string()],
            warnings,
        ))
    }

    fn prompt_lookup(&self) -> Result<(BTreeMap<String, String>, usize), RunnerError> {
        let mut prompts = BTreeMap::new();
        let mut count = 0;
        for file in [GENERATION_FILE, HELDOUT_FILE] {
            let path = self.artifact_path(file);
            if path.exists() {
                let triplets: Vec<Triplet> = jsonl::read_all(&path)?;
                count += triplets.len();
                for t in triplets {
                    prompts.insert(t.prompt_id, t.prompt);
                }
            }
        }
        Ok((prompts, count))
    }

    // ----- stage: report -----

    fn stage_report(&mut self) -> Result<(Vec<String>, Vec<String>), RunnerError> {
        let verdicts_path = self.require_artifact(VERDICTS_HELDOUT_FILE, Stage::JudgeHeldout)?;
        let acceptance_path = self.require_artifact(ACCEPTANCE_FILE, Stage::JudgeGen)?;
        let verdicts: Vec<Verdict> = jsonl::read_all(&verdicts_path)?;
        let acceptance: AcceptanceArtifact = read_json(&acceptance_path)?;
        let accepted: std::collections::BTreeSet<String> =
            acceptance.overall.accepted_ids.iter().cloned().collect();
        let hypotheses = self.load_hypotheses(self.config.kl_fork.include_in_report)?;
        self.manifest.counts.hypotheses = hypotheses.len();

        let mut ratings: BTreeMap<(String, RatingDimension), f64> = BTreeMap::new();
        let ratings_path = self.artifact_path(RATINGS_FILE);
        let mut warnings = Vec::new();
        if ratings_path.exists() {
            let scores: Vec<RaterScore> = jsonl::read_all(&ratings_path)?;
            for score in scores {
                ratings.insert((score.hypothesis_id.clone(), score.dimension), score.mean);
            }
        } else {
            warnings.push("no ratings found; run `rate` for autorater columns".to_string());
        }

        let mut by_hypothesis: BTreeMap<&str, Vec<i8>> = BTreeMap::new();
        for v in &verdicts {
            by_hypothesis
                .entry(v.hypothesis_id.as_str())
                .or_default()
                .push(v.value);
        }

        let mut evals: Vec<HypothesisEval> = Vec::new();
        let mut rows: Vec<ReportRow> = Vec::new();
        for hypothesis in &hypotheses {
            if !accepted.contains(&hypothesis.id) {
                continue;
            }
            let Some(values) = by_hypothesis.get(hypothesis.id.as_str()) else {
                warnings.push(format!(
                    "accepted hypothesis {} has no held-out verdicts",
                    hypothesis.id
                ));
                continue;
            };
            let eval = metrics::evaluate_hypothesis(
                &hypothesis.id,
                values,
                true,
                ratings
                    .get(&(hypothesis.id.clone(), RatingDimension::Interestingness))
                    .copied(),
                ratings
                    .get(&(hypothesis.id.clone(), RatingDimension::Abstraction))
                    .copied(),
            )?;
            rows.push(ReportRow::from_eval(hypothesis, &eval));
            evals.push(eval);
        }

        jsonl::write_all(&self.artifact_path(EVAL_FILE), &evals)?;
        jsonl::write_all(&self.artifact_path(REPORT_FILE), &rows)?;
        let csv = report::summary_csv(&rows, &acceptance.per_method);
        write_text(&self.artifact_path(SUMMARY_FILE), &csv)?;

        let stats = self.response_stats()?;
        write_json(&self.artifact_path(RESPONSE_STATS_FILE), &stats)?;

        let mut artifacts = vec![
            EVAL_FILE.to_string(),
            REPORT_FILE.to_string(),
            SUMMARY_FILE.to_string(),
            RESPONSE_STATS_FILE.to_string(),
        ];
        let criteria = FilterCriteria {
            min_f: self.config.report.min_f,
            min_acc: self.config.report.min_acc,
            min_interestingness: self.config.report.min_interestingness,
            abstraction_min: self.config.report.abstraction_min,
            abstraction_max: self.config.report.abstraction_max,
        };
        if !criteria.is_empty() {
            let filtered = report::filter_report(&rows, &criteria);
            jsonl::write_all(&self.artifact_path(REPORT_FILTERED_FILE), &filtered)?;
            artifacts.push(REPORT_FILTERED_FILE.to_string());
        }
        Ok((artifacts, warnings))
    }

    fn response_stats(&self) -> Result<ResponseStats, RunnerError> {
        let mut tokens_a = 0usize;
        let mut tokens_b = 0usize;
        let mut n = 0usize;
        for file in [GENERATION_FILE, HELDOUT_FILE] {
            let path = self.artifact_path(file);
            if path.exists() {
                let triplets: Vec<Triplet> = jsonl::read_all(&path)?;
                for t in &triplets {
                    tokens_a += t.response_a.split_whitespace().count();
                    tokens_b += t.response_b.split_whitespace().count();
                }
                n += triplets.len();
            }
        }
        Ok(ResponseStats {
            model_a: self.config.models.a.clone(),
            model_b: self.config.models.b.clone(),
            mean_tokens_a: if n > 0 { tokens_a as f64 / n as f64 } else { 0.0 },
            mean_tokens_b: if n > 0 { tokens_b as f64 / n as f64 } else { 0.0 },
            n_triplets: n,
        })
    }
}

/// Runs a single stage under the given config (the CLI entrypoint shape).
pub fn run(stage: Stage, config: RunConfig) -> Result<(), RunnerError> {
    Runner::new(config)?.run(stage)
}

/// Builds a ready-to-run config for a bundled fixture: inputs are written
/// under `base_dir/inputs` and artifacts land in `base_dir/run`.
pub fn fixture_run_config(name: &str, seed: u64, base_dir: &Path) -> Result<RunConfig, RunnerError> {
    let spec = fixtures::build(name, seed).ok_or_else(|| RunnerError::UnknownFixture(name.to_string()))?;
    let inputs_dir = base_dir.join("inputs");
    let inputs = fixtures::materialize_inputs(name, seed, &inputs_dir)
        .map_err(|e| RunnerError::Io {
            path: inputs_dir.display().to_string(),
            message: e.to_string(),
        })?
        .ok_or_else(|| RunnerError::UnknownFixture(name.to_string()))?;

    let mut config = RunConfig {
        seed,
        run_dir: base_dir.join("run"),
        ..RunConfig::default()
    };
    config.models.a = spec.model_a;
    config.models.b = spec.model_b;
    config.gateway.mode = "fixture".into();
    config.gateway.fixture = Some(name.to_string());
    config.paths.prompts = Some(inputs.prompts);
    config.paths.sae_dump_a = inputs.sae_dump_a;
    config.paths.sae_dump_b = inputs.sae_dump_b;
    config.paths.kl_dump_dir = inputs.kl_dump_dir;
    config.kl_fork.top_n_forks = 2;
    match name {
        fixtures::TABLE_FIXTURE => {
            config.collect.n_generation = 1000;
            config.collect.n_heldout = 500;
        }
        fixtures::LENGTH_FIXTURE => {
            config.collect.n_generation = 200;
            config.collect.n_heldout = 100;
            config.run.stages = [
                Stage::Collect,
                Stage::DiffLlm,
                Stage::JudgeGen,
                Stage::JudgeHeldout,
                Stage::Rate,
                Stage::Report,
            ]
            .iter()
            .map(|s| s.name().to_string())
            .collect();
        }
        _ => {}
    }
    Ok(config)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, RunnerError> {
    let text = std::fs::read_to_string(path).map_err(|e| RunnerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    serde_json::from_str(&text).map_err(|e| RunnerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RunnerError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| RunnerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| RunnerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), RunnerError> {
    std::fs::write(path, text).map_err(|e| RunnerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

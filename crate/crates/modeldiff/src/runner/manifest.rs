//! The run manifest: config snapshot, stage completion, artifact hashes,
//! counts, and warnings. Rewritten after every stage; contains nothing
//! time-dependent, so identical inputs reproduce identical manifests.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use super::RunnerError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageRecord {
    pub completed: bool,
    /// Artifact file name -> sha256 of its bytes.
    pub artifacts: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Counts {
    #[serde(default)]
    pub prompts: usize,
    #[serde(default)]
    pub triplets: usize,
    #[serde(default)]
    pub skipped_prompts: usize,
    #[serde(default)]
    pub hypotheses: usize,
    #[serde(default)]
    pub verdicts: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub config: RunConfig,
    pub template_hashes: BTreeMap<String, String>,
    pub stages: BTreeMap<String, StageRecord>,
    pub counts: Counts,
}

pub fn file_sha256(path: &Path) -> Result<String, RunnerError> {
    let bytes = std::fs::read(path).map_err(|e| RunnerError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(hex::encode(hasher.finalize()))
}

impl RunManifest {
    pub fn new(config: RunConfig, template_hashes: BTreeMap<String, String>) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(config.models.a.as_bytes());
        hasher.update([0x1f]);
        hasher.update(config.models.b.as_bytes());
        hasher.update(config.seed.to_le_bytes());
        let run_id = format!("run-{}", hex::encode(&hasher.finalize()[..6]));
        Self {
            run_id,
            config,
            template_hashes,
            stages: BTreeMap::new(),
            counts: Counts::default(),
        }
    }

    /// Loads the manifest from a run directory, or starts a fresh one.
    pub fn load_or_new(
        run_dir: &Path,
        config: RunConfig,
        template_hashes: BTreeMap<String, String>,
    ) -> Self {
        let path = run_dir.join(MANIFEST_FILE);
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(manifest) = serde_json::from_str::<RunManifest>(&text) {
                return Self {
                    config,
                    template_hashes,
                    ..manifest
                };
            }
        }
        Self::new(config, template_hashes)
    }

    pub fn save(&self, run_dir: &Path) -> Result<(), RunnerError> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).map_err(|e| RunnerError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(&path, text).map_err(|e| RunnerError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// Replaces a stage's record with fresh artifact hashes and warnings.
    pub fn complete_stage(
        &mut self,
        run_dir: &Path,
        stage: &str,
        artifact_files: &[String],
        warnings: Vec<String>,
    ) -> Result<(), RunnerError> {
        let mut artifacts = BTreeMap::new();
        for file in artifact_files {
            artifacts.insert(file.clone(), file_sha256(&run_dir.join(file))?);
        }
        self.stages.insert(
            stage.to_string(),
            StageRecord {
                completed: true,
                artifacts,
                warnings,
            },
        );
        Ok(())
    }

    pub fn stage_completed(&self, stage: &str) -> bool {
        self.stages.get(stage).is_some_and(|s| s.completed)
    }

    /// Every artifact hash across stages, keyed by file name.
    pub fn all_artifact_hashes(&self) -> BTreeMap<String, String> {
        let mut all = BTreeMap::new();
        for record in self.stages.values() {
            for (file, hash) in &record.artifacts {
                all.insert(file.clone(), hash.clone());
            }
        }
        all
    }
}

use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context};
use serde::Deserialize;

use readme_drift::dataset::{BuildOptions, ChronologyMode, FilterThresholds};
use readme_drift::forge::{ForgeConfig, DEFAULT_BASE_URL};
use readme_drift::llm::GatewayConfig;
use readme_drift::pipeline::PipelineConfig;

pub const LLM_KEY_ENV: &str = "LLM_API_KEY";

/// Settings file. Secrets never live here; they come from `FORGE_TOKEN`
/// and `LLM_API_KEY`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub seed: u64,
    pub workers: Option<usize>,
    pub forge: ForgeSection,
    pub llm: LlmSection,
    pub embedding: EmbeddingSection,
    pub pipeline: PipelineConfig,
    pub dataset: DatasetSection,
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForgeSection {
    pub base_url: String,
    pub per_page: u32,
    pub max_retries: u32,
    pub commit_files: bool,
    pub timeout_secs: u64,
}

impl Default for ForgeSection {
    fn default() -> Self {
        let d = ForgeConfig::default();
        Self {
            base_url: DEFAULT_BASE_URL.into(),
            per_page: d.per_page,
            max_retries: d.max_retries,
            commit_files: d.commit_files,
            timeout_secs: 30,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmSection {
    pub url: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
    pub budget_tokens: usize,
    pub max_tokens: u32,
    pub max_in_flight: usize,
    pub transport_retries: u32,
}

impl Default for LlmSection {
    fn default() -> Self {
        let g = GatewayConfig::default();
        Self {
            url: None,
            model: "gpt-4o".into(),
            timeout_secs: 120,
            budget_tokens: g.budget_tokens,
            max_tokens: g.max_tokens,
            max_in_flight: g.max_in_flight,
            transport_retries: g.transport_retries,
        }
    }
}

/// Without a URL the offline hashed bag-of-words embedder is used.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbeddingSection {
    pub url: Option<String>,
    pub model: String,
    pub timeout_secs: u64,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        Self {
            url: None,
            model: "text-embedding-3-small".into(),
            timeout_secs: 60,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub max_readme_paragraphs: usize,
    pub max_changed_files: usize,
    pub max_commits: usize,
    pub negative_ratio: f64,
    pub chronology_minutes: i64,
    pub chronology: ChronologyMode,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let t = FilterThresholds::default();
        let b = BuildOptions::default();
        Self {
            max_readme_paragraphs: t.max_readme_paragraphs,
            max_changed_files: t.max_changed_files,
            max_commits: t.max_commits,
            negative_ratio: b.negative_ratio,
            chronology_minutes: b.chronology_minutes,
            chronology: b.chronology_mode,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsSection {
    pub cache_dir: Option<PathBuf>,
    pub replay: Option<PathBuf>,
    pub templates_dir: Option<PathBuf>,
}

impl AppConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("cannot read config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("invalid config {}", p.display()))?
            }
            None => Self::default(),
        };
        Ok(cfg)
    }

    /// Checks every section; run again after flags are applied.
    pub fn validate(&self) -> anyhow::Result<()> {
        self.pipeline.validate().map_err(anyhow::Error::msg)?;
        self.thresholds().validate().map_err(anyhow::Error::msg)?;
        self.forge_config().validate()?;
        if self.workers == Some(0) {
            bail!("workers must be at least 1");
        }
        if !(self.dataset.negative_ratio >= 0.0 && self.dataset.negative_ratio.is_finite()) {
            bail!("negative_ratio must be a finite non-negative number");
        }
        if self.dataset.chronology_minutes < 0 {
            bail!("chronology_minutes must be non-negative");
        }
        if self.llm.budget_tokens == 0 || self.llm.max_in_flight == 0 {
            bail!("llm budget_tokens and max_in_flight must be at least 1");
        }
        Ok(())
    }

    pub fn thresholds(&self) -> FilterThresholds {
        FilterThresholds {
            max_readme_paragraphs: self.dataset.max_readme_paragraphs,
            max_changed_files: self.dataset.max_changed_files,
            max_commits: self.dataset.max_commits,
        }
    }

    pub fn build_options(&self) -> BuildOptions {
        BuildOptions {
            negative_ratio: self.dataset.negative_ratio,
            seed: self.seed,
            chronology_minutes: self.dataset.chronology_minutes,
            chronology_mode: self.dataset.chronology,
        }
    }

    /// Forge settings with the token from the environment.
    pub fn forge_config(&self) -> ForgeConfig {
        ForgeConfig {
            base_url: self.forge.base_url.clone(),
            per_page: self.forge.per_page,
            max_retries: self.forge.max_retries,
            commit_files: self.forge.commit_files,
            ..ForgeConfig::from_env()
        }
    }

    pub fn forge_timeout(&self) -> Duration {
        Duration::from_secs(self.forge.timeout_secs)
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            budget_tokens: self.llm.budget_tokens,
            max_tokens: self.llm.max_tokens,
            transport_retries: self.llm.transport_retries,
            max_in_flight: self.llm.max_in_flight,
        }
    }

    pub fn workers(&self) -> usize {
        self.workers.unwrap_or(1)
    }
}

pub fn llm_api_key() -> Option<String> {
    std::env::var(LLM_KEY_ENV).ok().filter(|k| !k.is_empty())
}

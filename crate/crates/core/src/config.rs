//! Runtime configuration: a TOML file plus `FMSEL_*` environment overrides.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{CriterionWeights, HQ_THRESHOLD};
use crate::extraction::ExtractionConfig;
use crate::gateway::{
    Embedder, GatewayError, HashingEmbedder, LiveProvider, LiveProviderConfig, ScriptedProvider, TextGenerator,
    Throttled, HASHING_DIMENSION,
};
use crate::orchestrator::AgentConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("config syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("environment variable {name}: {reason}")]
    Env { name: String, reason: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    Scripted,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    /// Fixture for the scripted provider; empty script when absent.
    pub script: Option<PathBuf>,
    /// Fixture answering clarification questions during evaluation.
    pub user_script: Option<PathBuf>,
    pub live: LiveProviderConfig,
    pub max_concurrency: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig {
            kind: ProviderKind::Scripted,
            script: None,
            user_script: None,
            live: LiveProviderConfig::default(),
            max_concurrency: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedderKind {
    Hashing,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub kind: EmbedderKind,
    pub dimension: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig {
            kind: EmbedderKind::Hashing,
            dimension: HASHING_DIMENSION,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub catalog: PathBuf,
    pub index_cache: Option<PathBuf>,
    pub memory: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            catalog: PathBuf::from("data/catalog.jsonl"),
            index_cache: None,
            memory: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub weights: CriterionWeights,
    pub hq_threshold: f64,
    pub seed: u64,
    pub count_per_template: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            weights: CriterionWeights::default(),
            hq_threshold: HQ_THRESHOLD,
            seed: 0,
            count_per_template: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub host: String,
    pub port: u16,
    pub cors_origins: Vec<String>,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            host: "127.0.0.1".into(),
            port: 8080,
            cors_origins: vec!["http://localhost:5173".into()],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub provider: ProviderConfig,
    pub embedder: EmbedderConfig,
    pub paths: PathsConfig,
    pub agent: AgentConfig,
    pub extraction: ExtractionConfig,
    pub eval: EvalConfig,
    pub server: ServerConfig,
}

fn env_parse<T: std::str::FromStr>(name: &str, raw: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    raw.trim().parse().map_err(|e: T::Err| ConfigError::Env {
        name: name.into(),
        reason: e.to_string(),
    })
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let c: Config = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Reads `path` when given (defaults otherwise), then applies the
    /// process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        let mut c = match path {
            Some(p) => toml::from_str(&std::fs::read_to_string(p)?)?,
            None => Config::default(),
        };
        c.apply_env(|k| std::env::var(k).ok())?;
        c.validate()?;
        Ok(c)
    }

    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        let get = |k: &str| lookup(k).filter(|v| !v.trim().is_empty());
        if let Some(v) = get("FMSEL_PROVIDER") {
            self.provider.kind = match v.trim() {
                "scripted" => ProviderKind::Scripted,
                "live" => ProviderKind::Live,
                other => {
                    return Err(ConfigError::Env {
                        name: "FMSEL_PROVIDER".into(),
                        reason: format!("expected scripted or live, got {other}"),
                    })
                }
            };
        }
        if let Some(v) = get("FMSEL_EMBEDDER") {
            self.embedder.kind = match v.trim() {
                "hashing" => EmbedderKind::Hashing,
                "live" => EmbedderKind::Live,
                other => {
                    return Err(ConfigError::Env {
                        name: "FMSEL_EMBEDDER".into(),
                        reason: format!("expected hashing or live, got {other}"),
                    })
                }
            };
        }
        if let Some(v) = get("FMSEL_SCRIPT") {
            self.provider.script = Some(v.into());
        }
        if let Some(v) = get("FMSEL_USER_SCRIPT") {
            self.provider.user_script = Some(v.into());
        }
        if let Some(v) = get("FMSEL_BASE_URL") {
            self.provider.live.base_url = v;
        }
        if let Some(v) = get("FMSEL_CHAT_MODEL") {
            self.provider.live.chat_model = v;
        }
        if let Some(v) = get("FMSEL_EMBEDDING_MODEL") {
            self.provider.live.embedding_model = v;
        }
        if let Some(v) = get("FMSEL_API_KEY_ENV") {
            self.provider.live.api_key_env = v;
        }
        if let Some(v) = get("FMSEL_CATALOG") {
            self.paths.catalog = v.into();
        }
        if let Some(v) = get("FMSEL_INDEX_CACHE") {
            self.paths.index_cache = Some(v.into());
        }
        if let Some(v) = get("FMSEL_MEMORY") {
            self.paths.memory = Some(v.into());
        }
        if let Some(v) = get("FMSEL_RETRIEVAL_K") {
            self.agent.retrieval_k = env_parse("FMSEL_RETRIEVAL_K", &v)?;
        }
        if let Some(v) = get("FMSEL_RETRIEVAL_MIN_SIMILARITY") {
            self.agent.retrieval_min_similarity = env_parse("FMSEL_RETRIEVAL_MIN_SIMILARITY", &v)?;
        }
        if let Some(v) = get("FMSEL_MAX_CANDIDATES") {
            self.agent.max_candidates = env_parse("FMSEL_MAX_CANDIDATES", &v)?;
        }
        if let Some(v) = get("FMSEL_CONFIDENCE_THRESHOLD") {
            self.agent.confidence_threshold = env_parse("FMSEL_CONFIDENCE_THRESHOLD", &v)?;
        }
        if let Some(v) = get("FMSEL_WEIGHTS") {
            let parts: Vec<f64> = v
                .split(',')
                .map(|p| env_parse("FMSEL_WEIGHTS", p))
                .collect::<Result<_, _>>()?;
            let weights: [f64; 7] = parts.try_into().map_err(|_| ConfigError::Env {
                name: "FMSEL_WEIGHTS".into(),
                reason: "expected 7 comma-separated numbers".into(),
            })?;
            self.eval.weights = CriterionWeights(weights);
        }
        if let Some(v) = get("FMSEL_PORT") {
            self.server.port = env_parse("FMSEL_PORT", &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let a = &self.agent;
        if a.retrieval_k == 0 {
            return Err(ConfigError::Invalid("agent.retrieval_k must be >= 1".into()));
        }
        if !(-1.0..=1.0).contains(&a.retrieval_min_similarity) {
            return Err(ConfigError::Invalid("agent.retrieval_min_similarity must be in [-1,1]".into()));
        }
        if !(0.0..=1.0).contains(&a.confidence_threshold) {
            return Err(ConfigError::Invalid("agent.confidence_threshold must be in [0,1]".into()));
        }
        if a.ranking.repeats == 0 {
            return Err(ConfigError::Invalid("agent.ranking.repeats must be >= 1".into()));
        }
        a.ranking
            .confidence
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.eval
            .weights
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.extraction
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.embedder.dimension == 0 {
            return Err(ConfigError::Invalid("embedder.dimension must be >= 1".into()));
        }
        Ok(())
    }

    fn scripted(path: Option<&Path>) -> Result<ScriptedProvider, ConfigError> {
        Ok(match path {
            Some(p) => ScriptedProvider::load(p)?,
            None => ScriptedProvider::new(),
        })
    }

    pub fn build_generator(&self) -> Result<Arc<dyn TextGenerator>, ConfigError> {
        let limit = self.provider.max_concurrency;
        Ok(match self.provider.kind {
            ProviderKind::Scripted => Arc::new(Self::scripted(self.provider.script.as_deref())?),
            ProviderKind::Live => Arc::new(Throttled::new(LiveProvider::from_env(self.provider.live.clone())?, limit)),
        })
    }

    /// The simulated user; falls back to the main generator's script.
    pub fn build_user(&self) -> Result<Arc<dyn TextGenerator>, ConfigError> {
        match (&self.provider.user_script, self.provider.kind) {
            (Some(p), _) => Ok(Arc::new(ScriptedProvider::load(p)?)),
            (None, _) => self.build_generator(),
        }
    }

    pub fn build_embedder(&self) -> Result<Arc<dyn Embedder>, ConfigError> {
        Ok(match self.embedder.kind {
            EmbedderKind::Hashing => Arc::new(HashingEmbedder::new(self.embedder.dimension)),
            EmbedderKind::Live => Arc::new(Throttled::new(
                LiveProvider::from_env(self.provider.live.clone())?,
                self.provider.max_concurrency,
            )),
        })
    }
}

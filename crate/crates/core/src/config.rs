//! Configuration file schema and provider construction.
//!
//! The file is TOML. Every table is optional; omitted keys take defaults.
//!
//! ```toml
//! seed = 7
//!
//! [sim]
//! budget = 100
//! inspection = true
//! metadata_scope = "all_prompts" # or decision_only
//! strategy = "debate"          # debate | chain_of_thought | direct
//!
//! [sim.retrieval]
//! cosine_threshold = 0.3
//!
//! [sim.provider]
//! kind = "mock"                # mock | live
//! chat_model = "gpt-4"
//! mock_script = "script.jsonl" # scripted replies; synthetic policy otherwise
//!
//! [sim.provider.http]
//! base_url = "https://api.openai.com/v1"
//! api_key_env = "OPENAI_API_KEY"
//!
//! [data]
//! passages = "data/toy/passages.jsonl"
//! queries = "data/toy/queries.jsonl"
//!
//! [experiment.price_sweep]     # parameters per experiment kind
//! n_questions = 5
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusConfig};
use crate::engine::SimConfig;
use crate::experiment::ExperimentKind;
use crate::gateway::mock::MockScript;
use crate::gateway::synthetic::{SyntheticPolicy, SyntheticProvider};
use crate::gateway::ChatProvider;
use crate::retrieval::{Embedder, EmbeddingIndex, HashingEmbedder, RetrievalError};
use crate::selection::{LexicalReranker, Reranker};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid mock script {path}: {message}")]
    Script { path: PathBuf, message: String },
    #[error("live provider requested but this build has no HTTP support")]
    NoHttp,
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub base_url: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            base_url: "https://api.openai.com/v1".into(),
            api_key_env: "OPENAI_API_KEY".into(),
            max_retries: 3,
            initial_backoff_ms: 500,
            timeout_secs: 120,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    #[default]
    Mock,
    Live,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub chat_model: String,
    /// Model behind the pairwise judge.
    pub judge_model: String,
    /// Model producing closed-book reference answers.
    pub reference_model: String,
    pub embedding_model: String,
    pub reranker_model: String,
    /// Reranker service URL; the lexical reranker is used when unset.
    pub reranker_url: Option<String>,
    /// Precomputed passage vectors; otherwise passages are embedded at start.
    pub vectors_file: Option<PathBuf>,
    /// Offline only: scripted replies instead of the synthetic policy.
    pub mock_script: Option<PathBuf>,
    pub synthetic: SyntheticPolicy,
    /// Dimension of the offline hashing embedder.
    pub hashing_dimension: usize,
    pub http: HttpConfig,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Mock,
            chat_model: "gpt-4".into(),
            judge_model: "gpt-4".into(),
            reference_model: "gpt-4".into(),
            embedding_model: "BAAI/bge-large-en-v1.5".into(),
            reranker_model: "cross-encoder/ms-marco-MiniLM-L-12-v2".into(),
            reranker_url: None,
            vectors_file: None,
            mock_script: None,
            synthetic: SyntheticPolicy::default(),
            hashing_dimension: 256,
            http: HttpConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub passages: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    /// Paraphrase fixtures for the rational-choice experiments.
    pub paraphrases: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AppConfig {
    pub seed: u64,
    pub sim: SimConfig,
    pub corpus: CorpusConfig,
    pub data: DataConfig,
    /// Default parameters for `bazaar experiment <kind>`.
    pub experiment: BTreeMap<ExperimentKind, serde_json::Value>,
}

impl AppConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config: AppConfig = toml::from_str(text)?;
        config.sim.seed = config.seed;
        config.sim.pricing = config.corpus.pricing.clone();
        Ok(config)
    }

    /// Reads a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut config = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(p) = p.as_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        };
        resolve(&mut config.data.passages);
        resolve(&mut config.data.queries);
        resolve(&mut config.data.paraphrases);
        resolve(&mut config.sim.provider.mock_script);
        resolve(&mut config.sim.provider.vectors_file);
        Ok(config)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.sim.seed = seed;
    }
}

/// Chat, embedding and reranking clients built from a provider config.
pub struct Providers {
    pub chat: Box<dyn ChatProvider>,
    pub embedder: Box<dyn Embedder>,
    pub reranker: Box<dyn Reranker>,
}

impl Providers {
    /// Offline providers: the synthetic policy (or a mock script), the
    /// hashing embedder and the lexical reranker.
    pub fn offline(config: &ProviderConfig, seed: u64) -> Result<Self, ConfigError> {
        let chat: Box<dyn ChatProvider> = match &config.mock_script {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                Box::new(MockScript::parse(&text).map_err(|message| ConfigError::Script {
                    path: path.clone(),
                    message,
                })?)
            }
            None => Box::new(SyntheticProvider::new(seed, config.synthetic.clone())),
        };
        Ok(Self {
            chat,
            embedder: Box::new(HashingEmbedder {
                dimension: config.hashing_dimension,
            }),
            reranker: Box::new(LexicalReranker),
        })
    }

    pub fn build(config: &ProviderConfig, seed: u64) -> Result<Self, ConfigError> {
        match config.kind {
            ProviderKind::Mock => Self::offline(config, seed),
            ProviderKind::Live => Self::live(config),
        }
    }

    #[cfg(feature = "http")]
    fn live(config: &ProviderConfig) -> Result<Self, ConfigError> {
        use crate::gateway::http::{HttpReranker, OpenAiChat, OpenAiEmbedder};
        let reranker: Box<dyn Reranker> = match &config.reranker_url {
            Some(url) => Box::new(HttpReranker::new(
                config.http.clone(),
                url.clone(),
                config.reranker_model.clone(),
            )),
            None => Box::new(LexicalReranker),
        };
        Ok(Self {
            chat: Box::new(OpenAiChat::new(config.http.clone(), config.chat_model.clone())),
            embedder: Box::new(OpenAiEmbedder::new(
                config.http.clone(),
                config.embedding_model.clone(),
            )),
            reranker,
        })
    }

    #[cfg(not(feature = "http"))]
    fn live(_: &ProviderConfig) -> Result<Self, ConfigError> {
        Err(ConfigError::NoHttp)
    }
}

/// Builds chat clients by model name, for experiments that mix models.
#[derive(Clone, Debug)]
pub enum ChatSource {
    Script(String),
    Synthetic {
        seed: u64,
        policy: SyntheticPolicy,
        /// Model that gets the unmixed seed.
        primary_model: String,
    },
    Live(HttpConfig),
}

impl ChatSource {
    pub fn from_config(config: &ProviderConfig, seed: u64) -> Result<Self, ConfigError> {
        match (config.kind, &config.mock_script) {
            (ProviderKind::Live, _) if cfg!(feature = "http") => Ok(ChatSource::Live(config.http.clone())),
            (ProviderKind::Live, _) => Err(ConfigError::NoHttp),
            (ProviderKind::Mock, Some(path)) => {
                let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                    path: path.clone(),
                    source,
                })?;
                MockScript::parse(&text).map_err(|message| ConfigError::Script {
                    path: path.clone(),
                    message,
                })?;
                Ok(ChatSource::Script(text))
            }
            (ProviderKind::Mock, None) => Ok(ChatSource::Synthetic {
                seed,
                policy: config.synthetic.clone(),
                primary_model: config.chat_model.clone(),
            }),
        }
    }

    pub fn chat(&self, model: &str) -> Box<dyn ChatProvider> {
        match self {
            ChatSource::Script(text) => Box::new(MockScript::parse(text).expect("validated at load")),
            ChatSource::Synthetic {
                seed,
                policy,
                primary_model,
            } => {
                // other models behave like differently seeded copies
                let seed = if model == primary_model {
                    *seed
                } else {
                    *seed ^ u64::from_str_radix(&crate::text::sha256_hex(model.as_bytes())[..16], 16).expect("hex")
                };
                Box::new(SyntheticProvider::new(seed, policy.clone()))
            }
            #[cfg(feature = "http")]
            ChatSource::Live(http) => Box::new(crate::gateway::http::OpenAiChat::new(http.clone(), model.to_owned())),
            #[cfg(not(feature = "http"))]
            ChatSource::Live(_) => unreachable!("rejected in from_config"),
        }
    }
}

/// Loads precomputed vectors when configured, else embeds the corpus.
pub fn build_index(
    config: &ProviderConfig,
    corpus: &Corpus,
    embedder: &dyn Embedder,
) -> Result<EmbeddingIndex, ConfigError> {
    match &config.vectors_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
                path: path.clone(),
                source,
            })?;
            Ok(EmbeddingIndex::parse_jsonl(&text)?)
        }
        None => Ok(EmbeddingIndex::build(corpus, embedder)?),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_has_documented_defaults() {
        let c = AppConfig::parse("").unwrap();
        assert_eq!(c.sim.budget, 100);
        assert_eq!(c.sim.tree.max_depth, 3);
        assert_eq!(c.sim.tree.max_followups, 3);
        assert_eq!(c.sim.tree.node_cap, 40);
        assert_eq!(c.sim.n_shortlist, 50);
        assert_eq!(c.sim.m_shortlist, 3);
        assert!(c.sim.inspection);
        assert_eq!(c.sim.retrieval.top_k, 5);
        assert_eq!(c.sim.provider.kind, ProviderKind::Mock);
    }

    #[test]
    fn nested_tables_override() {
        let c = AppConfig::parse(
            "seed = 9\n[sim]\nbudget = 20\nstrategy = \"cot\"\n[sim.retrieval]\ntop_k = 2\n[corpus.pricing]\nscale = 0.02\n",
        )
        .unwrap();
        assert_eq!(c.sim.seed, 9);
        assert_eq!(c.sim.budget, 20);
        assert_eq!(c.sim.retrieval.top_k, 2);
        assert_eq!(c.sim.pricing.scale, 0.02);
        assert!(AppConfig::parse("[sim]\nbudget = \"lots\"").is_err());
        let c = AppConfig::parse("[experiment.positional_bias]\nn_questions = 4\n").unwrap();
        assert_eq!(c.experiment[&ExperimentKind::PositionalBias]["n_questions"], 4);
    }
}

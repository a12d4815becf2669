//! JSON run manifest: backends, cost bases, embedding, executor and loop
//! constants. Secrets are never stored here, only the names of the
//! environment variables holding them.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{ClinicalNote, SymptomCatalog};
use crate::costing::CostBasis;
use crate::gateway::{Cassette, ChatBackend, Gateway, RemoteBackend, RetryPolicy, ScriptedBackend, DEFAULT_PARALLELISM};
use crate::metrics::PrimaryMetric;
use crate::orchestrator::RunConfig;
use crate::sim::{SimStudent, SimTeacher};
use crate::strategies::{ExecutorSettings, FineTuneExecutor, HttpExecutor, MockExecutor, RagSettings, RunMode};
use crate::vecstore::{EmbeddingProvider, HashEmbedder, HttpEmbedder, DEFAULT_DIMENSION};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("environment variable `{0}` is not set")]
    MissingSecret(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    /// OpenAI-compatible chat-completions endpoint.
    Remote {
        base_url: String,
        model: String,
        /// Name of the environment variable holding the bearer token.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        api_key_env: Option<String>,
        #[serde(default)]
        supports_top_k: bool,
        #[serde(default = "default_timeout")]
        timeout_seconds: f64,
    },
    /// Simulated student over the loaded dataset.
    SimStudent {
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        base_rate: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        guided_rate: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        latency_seconds: Option<f64>,
    },
    SimTeacher {
        #[serde(default)]
        seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        latency_seconds: Option<f64>,
    },
    /// Always answers `reply`.
    Constant { reply: String },
}

fn default_timeout() -> f64 {
    60.0
}

fn default_parallelism() -> usize {
    DEFAULT_PARALLELISM
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(flatten)]
    pub kind: BackendKind,
    #[serde(default)]
    pub cost: CostBasis,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbeddingConfig {
    Hash {
        #[serde(default = "default_dimension")]
        dimension: usize,
        #[serde(default)]
        seed: u64,
    },
    /// `POST url {"text"} -> {"vector"}`.
    Http {
        url: String,
        #[serde(default = "default_dimension")]
        dimension: usize,
        #[serde(default = "default_timeout")]
        timeout_seconds: f64,
    },
}

fn default_dimension() -> usize {
    DEFAULT_DIMENSION
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig::Hash {
            dimension: DEFAULT_DIMENSION,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ExecutorKind {
    Mock {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fail_reason: Option<String>,
    },
    Http { base_url: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutorConfig {
    #[serde(flatten)]
    pub kind: ExecutorKind,
    #[serde(default = "default_poll")]
    pub poll_interval_seconds: f64,
    #[serde(default = "default_job_timeout")]
    pub timeout_seconds: f64,
}

fn default_poll() -> f64 {
    2.0
}

fn default_job_timeout() -> f64 {
    1800.0
}

impl Default for ExecutorConfig {
    fn default() -> Self {
        Self {
            kind: ExecutorKind::Mock { fail_reason: None },
            poll_interval_seconds: default_poll(),
            timeout_seconds: default_job_timeout(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoopConfig {
    pub max_epochs: u32,
    pub rounds_per_epoch: u32,
    pub primary_metric: PrimaryMetric,
    pub seed: u64,
    pub max_inferior_prompts: usize,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            max_epochs: 5,
            rounds_per_epoch: 16,
            primary_metric: PrimaryMetric::Accuracy,
            seed: 0,
            max_inferior_prompts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct DataPaths {
    pub notes: Option<PathBuf>,
    pub mmlu: Option<PathBuf>,
    pub store: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(default)]
    pub catalog: SymptomCatalog,
    pub backends: BTreeMap<String, BackendConfig>,
    pub student_backend: String,
    pub teacher_backend: String,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    #[serde(default)]
    pub executor: ExecutorConfig,
    #[serde(default, rename = "loop")]
    pub loop_settings: LoopConfig,
    #[serde(default)]
    pub rag: RagSettings,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub data: DataPaths,
    /// Concurrent symptom runs for `run --all`.
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Concurrent teacher calls during prep.
    #[serde(default = "default_parallelism")]
    pub prep_concurrency: usize,
}

fn default_workers() -> usize {
    4
}

/// How the gateway treats the configured backends.
#[derive(Debug, Clone)]
pub enum GatewayMode {
    Live,
    Record(Arc<Cassette>),
    Replay(Arc<Cassette>),
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: Config = serde_json::from_str(text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text)?;
        // Relative paths inside the file are relative to the file.
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(path) = p {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        rebase(&mut config.data.notes);
        rebase(&mut config.data.mmlu);
        rebase(&mut config.data.store);
        rebase(&mut config.templates_dir);
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        for role in [&self.student_backend, &self.teacher_backend] {
            if !self.backends.contains_key(role) {
                return invalid(format!("backend `{role}` is not defined"));
            }
        }
        for (name, b) in &self.backends {
            if name.contains('+') {
                return invalid(format!("backend name `{name}` must not contain '+'"));
            }
            if b.parallelism == 0 {
                return invalid(format!("backend `{name}`: parallelism must be >= 1"));
            }
            if let BackendKind::Remote { api_key_env: Some(var), .. } = &b.kind {
                if var.is_empty() || var.contains(char::is_whitespace) {
                    return invalid(format!("backend `{name}`: api_key_env must be an environment variable name"));
                }
            }
        }
        if self.loop_settings.max_epochs < 1 || self.loop_settings.rounds_per_epoch < 1 {
            return invalid("loop.max_epochs and loop.rounds_per_epoch must be >= 1".into());
        }
        if self.rag.k < 1 {
            return invalid("rag.k must be >= 1".into());
        }
        if self.retry.attempts < 1 {
            return invalid("retry.attempts must be >= 1".into());
        }
        if self.workers < 1 {
            return invalid("workers must be >= 1".into());
        }
        Ok(())
    }

    pub fn run_config(&self, symptom: &str, mode: RunMode) -> RunConfig {
        RunConfig {
            symptom: symptom.to_string(),
            mode,
            max_epochs: self.loop_settings.max_epochs,
            rounds_per_epoch: self.loop_settings.rounds_per_epoch,
            primary_metric: self.loop_settings.primary_metric,
            student_backend: self.student_backend.clone(),
            teacher_backend: self.teacher_backend.clone(),
            seed: self.loop_settings.seed,
            rag: self.rag,
            max_inferior_prompts: self.loop_settings.max_inferior_prompts,
        }
    }

    fn backend(&self, name: &str, b: &BackendConfig, notes: &[ClinicalNote]) -> Result<Arc<dyn ChatBackend>, ConfigError> {
        Ok(match &b.kind {
            BackendKind::Remote {
                base_url,
                model,
                api_key_env,
                supports_top_k,
                timeout_seconds,
            } => {
                let api_key = match api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| ConfigError::MissingSecret(var.clone()))?),
                    None => None,
                };
                Arc::new(
                    RemoteBackend::new(
                        name,
                        base_url,
                        model.clone(),
                        api_key,
                        *supports_top_k,
                        Duration::from_secs_f64(*timeout_seconds),
                    )
                    .map_err(ConfigError::Invalid)?,
                )
            }
            BackendKind::SimStudent {
                seed,
                base_rate,
                guided_rate,
                latency_seconds,
            } => {
                let mut s = SimStudent::new(notes, *seed);
                if let Some(v) = base_rate {
                    s.base_rate = *v;
                }
                if let Some(v) = guided_rate {
                    s.guided_rate = *v;
                }
                if let Some(v) = latency_seconds {
                    s.latency_seconds = *v;
                }
                Arc::new(s)
            }
            BackendKind::SimTeacher { seed, latency_seconds } => {
                let mut t = SimTeacher::new(*seed);
                if let Some(v) = latency_seconds {
                    t.latency_seconds = *v;
                }
                Arc::new(t)
            }
            BackendKind::Constant { reply } => Arc::new(ScriptedBackend::constant(reply.clone())),
        })
    }

    /// Gateway over every configured backend. Simulated students answer
    /// from `notes`. In replay mode no backend is constructed, so no
    /// secrets are needed.
    pub fn build_gateway(&self, notes: &[ClinicalNote], mode: GatewayMode) -> Result<Gateway, ConfigError> {
        let mut builder = Gateway::builder().retry(self.retry);
        for (name, b) in &self.backends {
            builder = match &mode {
                GatewayMode::Replay(_) => builder.replay_backend(name.clone(), b.cost.clone()),
                _ => builder.backend_with_parallelism(
                    name.clone(),
                    self.backend(name, b, notes)?,
                    b.cost.clone(),
                    b.parallelism,
                ),
            };
        }
        builder = match mode {
            GatewayMode::Live => builder,
            GatewayMode::Record(c) => builder.record(c),
            GatewayMode::Replay(c) => builder.replay(c),
        };
        Ok(builder.build())
    }

    pub fn build_embedder(&self) -> Result<Box<dyn EmbeddingProvider>, ConfigError> {
        Ok(match &self.embedding {
            EmbeddingConfig::Hash { dimension, seed } => Box::new(HashEmbedder::new(*dimension, *seed)),
            EmbeddingConfig::Http {
                url,
                dimension,
                timeout_seconds,
            } => Box::new(
                HttpEmbedder::new(url.clone(), *dimension, Duration::from_secs_f64(*timeout_seconds))
                    .map_err(ConfigError::Invalid)?,
            ),
        })
    }

    pub fn build_executor(&self) -> Result<Box<dyn FineTuneExecutor>, ConfigError> {
        Ok(match &self.executor.kind {
            ExecutorKind::Mock { fail_reason } => {
                let mock = MockExecutor::new();
                Box::new(match fail_reason {
                    Some(r) => mock.failing(r.clone()),
                    None => mock,
                })
            }
            ExecutorKind::Http { base_url } => Box::new(
                HttpExecutor::new(base_url.clone(), Duration::from_secs(30)).map_err(ConfigError::Invalid)?,
            ),
        })
    }

    pub fn executor_settings(&self) -> ExecutorSettings {
        ExecutorSettings {
            poll_interval: Duration::from_secs_f64(self.executor.poll_interval_seconds.max(0.0)),
            timeout: Duration::from_secs_f64(self.executor.timeout_seconds.max(0.0)),
        }
    }
}

/// Config used by the `fixture` command: simulated student and teacher, a
/// remote-priced teacher and an energy-priced student.
pub fn fixture_config() -> Config {
    let json = serde_json::json!({
        "backends": {
            "student": {
                "kind": "sim_student",
                "cost": {"basis": "energy", "device_watts": 300.0, "rate": "0.1688"}
            },
            "teacher": {
                "kind": "sim_teacher",
                "cost": {"basis": "tokens", "name": "remote", "input_price": "5.00", "output_price": "15.00"}
            }
        },
        "student_backend": "student",
        "teacher_backend": "teacher",
        "embedding": {"kind": "hash", "dimension": 768, "seed": 0},
        "executor": {"kind": "mock"},
        "data": {"notes": "notes.jsonl", "mmlu": "mmlu.jsonl", "store": "store.jsonl"}
    });
    serde_json::from_value(json).expect("fixture config is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_config_round_trips() {
        let c = fixture_config();
        c.validate().unwrap();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(Config::parse(&text).unwrap(), c);
        assert_eq!(c.loop_settings.max_epochs, 5);
        assert_eq!(c.rag.k, 3);
    }

    #[test]
    fn rejects_undefined_backend() {
        let mut c = fixture_config();
        c.teacher_backend = "nope".into();
        assert!(matches!(c.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn missing_secret_is_reported_by_name() {
        let text = r#"{
            "backends": {
                "t": {"kind": "remote", "base_url": "http://127.0.0.1:9", "model": "m", "api_key_env": "SYMREFINE_TEST_UNSET_KEY"},
                "s": {"kind": "constant", "reply": "yes"}
            },
            "student_backend": "s", "teacher_backend": "t"
        }"#;
        let c = Config::parse(text).unwrap();
        let err = c.build_gateway(&[], GatewayMode::Live).unwrap_err();
        assert!(err.to_string().contains("SYMREFINE_TEST_UNSET_KEY"));
        assert!(c
            .build_gateway(&[], GatewayMode::Replay(Arc::new(Cassette::new())))
            .is_ok());
    }
}

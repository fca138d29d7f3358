//! On-disk JSON configuration for the `nasloop` executable.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{SubprocessEvaluator, TrainConfig, DEFAULT_WORKER_SEED};
use crate::llm::{LlmClient, LlmEndpoint, SamplingParams};
use crate::model::{Ablation, ConfigError, DatasetSpec, RunConfig, DEFAULT_WINDOW_SIZE};
use crate::prompt::{TemplateError, TemplateSet};
use crate::search::Backends;
use crate::sim::{sim_backends, SimParams};

#[derive(Debug, Error)]
pub enum CliConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        message: String,
    },
    #[error(transparent)]
    Invalid(#[from] ConfigError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Llm,
    #[default]
    Sim,
}

/// A built-in dataset name or a full descriptor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetChoice {
    Name(String),
    Spec(DatasetSpec),
}

impl Default for DatasetChoice {
    fn default() -> Self {
        DatasetChoice::Name("cifar10".into())
    }
}

impl DatasetChoice {
    pub fn resolve(&self) -> Result<DatasetSpec, ConfigError> {
        match self {
            DatasetChoice::Name(name) => DatasetSpec::by_name(name).ok_or_else(|| {
                ConfigError::invalid(
                    "dataset",
                    format!("unknown dataset `{name}` (expected cifar10, cifar100, or imagenette)"),
                )
            }),
            DatasetChoice::Spec(spec) => {
                spec.validate()?;
                Ok(spec.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingSection {
    pub temperature: f64,
    pub top_p: f64,
    pub max_new_tokens: u32,
}

impl Default for SamplingSection {
    fn default() -> Self {
        let d = SamplingParams::default();
        Self {
            temperature: d.temperature,
            top_p: d.top_p,
            max_new_tokens: d.max_new_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointSection {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_request_timeout")]
    pub request_timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
}

fn default_request_timeout() -> u64 {
    600
}

fn default_max_retries() -> u32 {
    3
}

impl EndpointSection {
    pub fn validate(&self, field: &str) -> Result<(), ConfigError> {
        self.to_endpoint_without_key().validate(field)?;
        if self.request_timeout_secs == 0 {
            return Err(ConfigError::invalid(
                format!("{field}.request_timeout_secs"),
                "must be positive",
            ));
        }
        Ok(())
    }

    fn to_endpoint_without_key(&self) -> LlmEndpoint {
        let mut e = LlmEndpoint::new(&self.base_url, &self.model);
        e.request_timeout = Duration::from_secs(self.request_timeout_secs);
        e.max_retries = self.max_retries;
        e
    }

    /// Resolves the API key from the environment.
    pub fn to_endpoint(&self, field: &str) -> Result<LlmEndpoint, ConfigError> {
        let mut e = self.to_endpoint_without_key();
        if let Some(var) = &self.api_key_env {
            let key = std::env::var(var).map_err(|_| {
                ConfigError::invalid(format!("{field}.api_key_env"), format!("environment variable `{var}` is not set"))
            })?;
            e.api_key = Some(key);
        }
        Ok(e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerSection {
    /// Program and arguments, e.g. `["python3", "worker/nasloop_worker.py"]`.
    pub command: Vec<String>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_worker_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scratch_dir: Option<PathBuf>,
}

fn default_worker_seed() -> u64 {
    DEFAULT_WORKER_SEED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub backend: BackendKind,
    pub max_iterations: u64,
    pub window_size: usize,
    pub seed: u64,
    pub dataset: DatasetChoice,
    pub sampling: SamplingSection,
    pub evaluation_timeout_secs: f64,
    pub extended_prompt: bool,
    pub top_k_exemplars: usize,
    pub ablation: Ablation,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generator: Option<EndpointSection>,
    /// Defaults to the generator endpoint.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub improver: Option<EndpointSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub log_path: Option<PathBuf>,
    /// Raw request/response transcript of every LLM call.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub llm_debug_log: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub worker: Option<WorkerSection>,
    pub sim: SimParams,
    /// Seeds used by `simulate`.
    pub seeds: Vec<u64>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            backend: BackendKind::Sim,
            max_iterations: 150,
            window_size: DEFAULT_WINDOW_SIZE,
            seed: 0,
            dataset: DatasetChoice::default(),
            sampling: SamplingSection::default(),
            evaluation_timeout_secs: 1800.0,
            extended_prompt: false,
            top_k_exemplars: DEFAULT_WINDOW_SIZE,
            ablation: Ablation::None,
            generator: None,
            improver: None,
            template_dir: None,
            log_path: None,
            llm_debug_log: None,
            worker: None,
            sim: SimParams::default(),
            seeds: (0..20).collect(),
        }
    }
}

/// serde_json appends " at line L column C"; the error already carries both.
fn strip_position(message: &str) -> String {
    match message.rfind(" at line ") {
        Some(i) => message[..i].to_string(),
        None => message.to_string(),
    }
}

impl CliConfig {
    pub fn from_json(text: &str, path: &Path) -> Result<Self, CliConfigError> {
        let config: CliConfig = serde_json::from_str(text).map_err(|e| CliConfigError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            column: e.column(),
            message: strip_position(&e.to_string()),
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, CliConfigError> {
        let text = fs::read_to_string(path).map_err(|source| CliConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text, path)
    }

    pub fn run_config(&self) -> Result<RunConfig, ConfigError> {
        if !(self.evaluation_timeout_secs > 0.0 && self.evaluation_timeout_secs.is_finite()) {
            return Err(ConfigError::invalid("evaluation_timeout_secs", "must be positive"));
        }
        let mut rc = RunConfig::new(self.max_iterations, self.dataset.resolve()?);
        rc.window_size = self.window_size;
        rc.seed = self.seed;
        rc.sampling = SamplingParams {
            temperature: self.sampling.temperature,
            top_p: self.sampling.top_p,
            max_new_tokens: self.sampling.max_new_tokens,
            base_seed: self.seed,
            call_counter: 0,
        };
        rc.evaluation_timeout = Duration::from_secs_f64(self.evaluation_timeout_secs);
        rc.extended_prompt = self.extended_prompt;
        rc.top_k_exemplars = self.top_k_exemplars;
        rc.ablation = self.ablation;
        rc.validate()?;
        Ok(rc)
    }

    /// Checks every field that does not need the environment or filesystem.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.run_config()?;
        match self.backend {
            BackendKind::Sim => self.sim.validate()?,
            BackendKind::Llm => {
                let generator = self
                    .generator
                    .as_ref()
                    .ok_or_else(|| ConfigError::invalid("generator", "required for the llm backend"))?;
                generator.validate("generator")?;
                if let Some(improver) = &self.improver {
                    improver.validate("improver")?;
                }
                let worker = self
                    .worker
                    .as_ref()
                    .ok_or_else(|| ConfigError::invalid("worker", "required for the llm backend"))?;
                if worker.command.is_empty() {
                    return Err(ConfigError::invalid("worker.command", "must not be empty"));
                }
                worker.train.validate()?;
            }
        }
        Ok(())
    }

    pub fn templates(&self) -> Result<TemplateSet, CliConfigError> {
        let set = match &self.template_dir {
            Some(dir) => TemplateSet::from_dir(dir)?,
            None => TemplateSet::builtin(),
        };
        set.validate()?;
        Ok(set)
    }

    /// Backends for one run. The sim backend ignores `seed` here: runs are
    /// seeded through the sampling parameters.
    pub fn backends(&self) -> Result<Backends, CliConfigError> {
        match self.backend {
            BackendKind::Sim => Ok(sim_backends(&self.sim)),
            BackendKind::Llm => {
                let rc = self.run_config()?;
                let gen_section = self
                    .generator
                    .as_ref()
                    .ok_or_else(|| ConfigError::invalid("generator", "required for the llm backend"))?;
                let generator = gen_section.to_endpoint("generator")?;
                let improver = match &self.improver {
                    Some(section) => section.to_endpoint("improver")?,
                    None => generator.clone(),
                };
                let mut gen_client = LlmClient::http(generator);
                let mut imp_client = LlmClient::http(improver);
                if let Some(path) = &self.llm_debug_log {
                    let io = |source| CliConfigError::Io {
                        path: path.clone(),
                        source,
                    };
                    gen_client = gen_client.with_debug_log(path).map_err(io)?;
                    imp_client = imp_client.with_debug_log(path).map_err(io)?;
                }
                let worker = self
                    .worker
                    .as_ref()
                    .ok_or_else(|| ConfigError::invalid("worker", "required for the llm backend"))?;
                let mut evaluator =
                    SubprocessEvaluator::new(worker.command.clone(), rc.dataset.clone(), rc.evaluation_timeout);
                evaluator.train = worker.train.clone();
                evaluator.seed = worker.seed;
                evaluator.scratch_dir = worker.scratch_dir.clone();
                Ok(Backends {
                    generator: Box::new(gen_client),
                    improver: Box::new(imp_client),
                    evaluator: Box::new(evaluator),
                })
            }
        }
    }
}

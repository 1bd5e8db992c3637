//! Harness configuration. Layers merge with precedence
//! flags > environment > config file > defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::forge::DialogueLimits;
use crate::gateway::{BackendConfig, BackendKind, GatewayError};
use crate::sandbox::ExecLimits;
use crate::selfdebug::DEFAULT_ROUNDS;

pub const ENV_API_KEY: &str = "MODEL_API_KEY";
pub const ENV_BASE_URL: &str = "MODEL_BASE_URL";
pub const ENV_MODEL_NAME: &str = "MODEL_NAME";
pub const ENV_RUNNER: &str = "PLOTBENCH_RUNNER";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("reading config {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing config {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] GatewayError),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub tasks: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub runs: Option<PathBuf>,
    pub workdir: Option<PathBuf>,
    pub prompts: Option<PathBuf>,
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct HarnessConfig {
    pub backend: Option<BackendConfig>,
    pub limits: ExecLimits,
    pub rounds: u32,
    pub workers: usize,
    pub seed: u64,
    pub paths: Paths,
    pub dialogue: DialogueLimits,
    /// Command line that starts the runner shim.
    pub runner: Option<String>,
    pub autocapture: bool,
    pub fake_executor: Option<PathBuf>,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            backend: None,
            limits: ExecLimits::default(),
            rounds: DEFAULT_ROUNDS,
            workers: 1,
            seed: 0,
            paths: Paths::default(),
            dialogue: DialogueLimits::default(),
            runner: None,
            autocapture: true,
            fake_executor: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendLayer {
    /// Shorthand such as `scripted:file.json` or an `https://` URL.
    pub spec: Option<String>,
    pub kind: Option<BackendKind>,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    pub temperature: Option<f64>,
    pub max_tokens: Option<u32>,
    pub max_retries: Option<u32>,
    pub cache_dir: Option<PathBuf>,
    pub script: Option<PathBuf>,
    pub api_key: Option<String>,
    pub request_timeout_s: Option<u64>,
    pub max_in_flight: Option<usize>,
    pub supports_images: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsLayer {
    pub timeout_s: Option<f64>,
    pub grace_s: Option<f64>,
    pub max_output_bytes: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DialogueLayer {
    pub max_turns: Option<usize>,
    pub max_chars: Option<usize>,
}

/// One source of settings; unset fields defer to lower layers.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub rounds: Option<u32>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
    pub runner: Option<String>,
    pub autocapture: Option<bool>,
    pub fake_executor: Option<PathBuf>,
    #[serde(default)]
    pub backend: BackendLayer,
    #[serde(default)]
    pub limits: LimitsLayer,
    #[serde(default)]
    pub dialogue: DialogueLayer,
    #[serde(default)]
    pub paths: Paths,
}

impl ConfigLayer {
    /// Parse a TOML file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let raw = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut layer: ConfigLayer = toml::from_str(&raw).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if let Some(base) = path.parent() {
            layer.rebase(base);
        }
        Ok(layer)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut().filter(|p| p.is_relative()) {
                *path = base.join(&*path);
            }
        };
        fix(&mut self.fake_executor);
        fix(&mut self.backend.cache_dir);
        fix(&mut self.backend.script);
        fix(&mut self.paths.tasks);
        fix(&mut self.paths.corpus);
        fix(&mut self.paths.runs);
        fix(&mut self.paths.workdir);
        fix(&mut self.paths.prompts);
    }

    /// Settings taken from the environment through `lookup`.
    pub fn from_env(lookup: impl Fn(&str) -> Option<String>) -> Self {
        let get = |k: &str| lookup(k).filter(|v| !v.trim().is_empty());
        let mut layer = ConfigLayer::default();
        layer.backend.api_key = get(ENV_API_KEY);
        layer.backend.endpoint = get(ENV_BASE_URL);
        layer.backend.model_name = get(ENV_MODEL_NAME);
        layer.runner = get(ENV_RUNNER);
        layer
    }
}

fn set<T: Clone>(slot: &mut T, value: &Option<T>) {
    if let Some(v) = value {
        *slot = v.clone();
    }
}

fn apply_backend(current: Option<BackendConfig>, layer: &BackendLayer) -> Result<Option<BackendConfig>, ConfigError> {
    let mut backend = match (&layer.spec, layer.kind) {
        (Some(spec), _) => Some(BackendConfig::from_spec(spec)?),
        (None, Some(kind)) if current.as_ref().map(|b| b.kind) != Some(kind) => Some(BackendConfig::new(kind)),
        _ => current,
    };
    if let Some(b) = backend.as_mut() {
        if b.kind == BackendKind::Http {
            set(&mut b.endpoint, &layer.endpoint.clone().map(Some));
        }
        set(&mut b.model_name, &layer.model_name);
        set(&mut b.temperature, &layer.temperature);
        set(&mut b.max_tokens, &layer.max_tokens);
        set(&mut b.max_retries, &layer.max_retries);
        set(&mut b.cache_dir, &layer.cache_dir.clone().map(Some));
        set(&mut b.script, &layer.script.clone().map(Some));
        set(&mut b.api_key, &layer.api_key.clone().map(Some));
        set(&mut b.request_timeout_s, &layer.request_timeout_s);
        set(&mut b.max_in_flight, &layer.max_in_flight);
        set(&mut b.supports_images, &layer.supports_images);
    }
    Ok(backend)
}

impl HarnessConfig {
    /// Merge `layers` over the defaults, lowest precedence first.
    pub fn resolve(layers: &[ConfigLayer]) -> Result<Self, ConfigError> {
        let mut config = HarnessConfig::default();
        for layer in layers {
            config.apply(layer)?;
        }
        // A base URL alone selects the HTTP backend.
        if config.backend.is_none() {
            if let Some(endpoint) = layers.iter().rev().find_map(|l| l.backend.endpoint.clone()) {
                let mut http = BackendConfig::http(endpoint);
                for layer in layers {
                    http = apply_backend(Some(http), &BackendLayer { endpoint: None, ..layer.backend.clone() })?
                        .expect("backend present");
                }
                config.backend = Some(http);
            }
        }
        config.validate()?;
        Ok(config)
    }

    fn apply(&mut self, layer: &ConfigLayer) -> Result<(), ConfigError> {
        set(&mut self.rounds, &layer.rounds);
        set(&mut self.workers, &layer.workers);
        set(&mut self.seed, &layer.seed);
        set(&mut self.runner, &layer.runner.clone().map(Some));
        set(&mut self.autocapture, &layer.autocapture);
        set(&mut self.fake_executor, &layer.fake_executor.clone().map(Some));
        set(&mut self.limits.timeout_s, &layer.limits.timeout_s);
        set(&mut self.limits.grace_s, &layer.limits.grace_s);
        set(&mut self.limits.max_output_bytes, &layer.limits.max_output_bytes);
        set(&mut self.dialogue.max_turns, &layer.dialogue.max_turns);
        set(&mut self.dialogue.max_chars, &layer.dialogue.max_chars);
        set(&mut self.paths.tasks, &layer.paths.tasks.clone().map(Some));
        set(&mut self.paths.corpus, &layer.paths.corpus.clone().map(Some));
        set(&mut self.paths.runs, &layer.paths.runs.clone().map(Some));
        set(&mut self.paths.workdir, &layer.paths.workdir.clone().map(Some));
        set(&mut self.paths.prompts, &layer.paths.prompts.clone().map(Some));
        self.backend = apply_backend(self.backend.take(), &layer.backend)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.workers == 0 {
            return Err(ConfigError::Invalid("workers must be at least 1".into()));
        }
        if self.dialogue.max_turns == 0 || self.dialogue.max_chars == 0 {
            return Err(ConfigError::Invalid("dialogue limits must be positive".into()));
        }
        self.limits.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if let Some(backend) = &self.backend {
            backend.validate()?;
        }
        Ok(())
    }
}

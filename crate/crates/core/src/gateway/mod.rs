//! Chat-completion backends.
//!
//! All callers go through [`Gateway::complete`]. The backend is one of:
//! - `http`: an OpenAI-style `/chat/completions` endpoint behind an injected
//!   [`Transport`], with retries and exponential backoff;
//! - `replay`: answers only from the response cache, never touching the network;
//! - `scripted`: a deterministic table of canned replies for tests.
//!
//! When `cache_dir` is set, every fresh reply is stored under its
//! [`cache_key`] and identical requests are answered from disk.

mod http;
mod script;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::digest::{sha256_hex, write_atomic};
use crate::pool::Semaphore;

pub use http::{BackoffPolicy, ReqwestTransport, Transport, TransportError, TransportResponse};
pub use script::{ScriptEntry, ScriptTable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
    /// Optional image attachment, sent only to image-capable backends.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self::new(ChatRole::System, content)
    }
    pub fn user(content: impl Into<String>) -> Self {
        Self::new(ChatRole::User, content)
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Self::new(ChatRole::Assistant, content)
    }
    fn new(role: ChatRole, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            image: None,
        }
    }
    pub fn with_image(mut self, path: impl Into<PathBuf>) -> Self {
        self.image = Some(path.into());
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatDialogue {
    pub messages: Vec<ChatMessage>,
}

impl ChatDialogue {
    pub fn new(messages: Vec<ChatMessage>) -> Self {
        Self { messages }
    }

    /// Roles alternate user/assistant after an optional leading system turn,
    /// the dialogue ends on a user turn, and user/assistant turns are nonempty.
    pub fn validate(&self) -> Result<(), GatewayError> {
        let bad = |msg: String| Err(GatewayError::InvalidDialogue(msg));
        let body = match self.messages.first() {
            Some(m) if m.role == ChatRole::System => &self.messages[1..],
            _ => &self.messages[..],
        };
        if body.is_empty() {
            return bad("dialogue has no user turn".into());
        }
        for (i, msg) in body.iter().enumerate() {
            let expected = if i % 2 == 0 { ChatRole::User } else { ChatRole::Assistant };
            if msg.role != expected {
                return bad(format!("turn {i} has role {:?}, expected {expected:?}", msg.role));
            }
            if msg.content.trim().is_empty() {
                return bad(format!("turn {i} ({:?}) is empty", msg.role));
            }
        }
        if body.last().map(|m| m.role) != Some(ChatRole::User) {
            return bad("dialogue must end with a user turn".into());
        }
        Ok(())
    }

    pub fn assistant_turns(&self) -> usize {
        self.messages.iter().filter(|m| m.role == ChatRole::Assistant).count()
    }

    pub fn first_user(&self) -> Option<&ChatMessage> {
        self.messages.iter().find(|m| m.role == ChatRole::User)
    }

    pub fn last_user(&self) -> Option<&ChatMessage> {
        self.messages.iter().rev().find(|m| m.role == ChatRole::User)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Replay,
    Scripted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_model")]
    pub model_name: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    /// Script table for the scripted backend.
    #[serde(default)]
    pub script: Option<PathBuf>,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    #[serde(default = "default_backoff_base_ms")]
    pub backoff_base_ms: u64,
    #[serde(default = "default_backoff_cap_ms")]
    pub backoff_cap_ms: u64,
    #[serde(default = "default_request_timeout_s")]
    pub request_timeout_s: u64,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub supports_images: bool,
}

fn default_model() -> String {
    "default".into()
}
fn default_max_tokens() -> u32 {
    4096
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_base_ms() -> u64 {
    1_000
}
fn default_backoff_cap_ms() -> u64 {
    30_000
}
fn default_request_timeout_s() -> u64 {
    120
}
fn default_max_in_flight() -> usize {
    8
}

impl BackendConfig {
    pub fn new(kind: BackendKind) -> Self {
        Self {
            kind,
            endpoint: None,
            model_name: default_model(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            max_retries: default_max_retries(),
            cache_dir: None,
            script: None,
            api_key: None,
            backoff_base_ms: default_backoff_base_ms(),
            backoff_cap_ms: default_backoff_cap_ms(),
            request_timeout_s: default_request_timeout_s(),
            max_in_flight: default_max_in_flight(),
            supports_images: false,
        }
    }

    pub fn scripted(script: impl Into<PathBuf>) -> Self {
        Self {
            script: Some(script.into()),
            ..Self::new(BackendKind::Scripted)
        }
    }

    pub fn replay(cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            cache_dir: Some(cache_dir.into()),
            ..Self::new(BackendKind::Replay)
        }
    }

    pub fn http(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: Some(endpoint.into()),
            ..Self::new(BackendKind::Http)
        }
    }

    /// Parse a `kind:arg` shorthand: `scripted:<file>`, `replay:<dir>`,
    /// `http:<url>` (or a bare `http(s)://` URL).
    pub fn from_spec(spec: &str) -> Result<Self, GatewayError> {
        if spec.starts_with("http://") || spec.starts_with("https://") {
            return Ok(Self::http(spec));
        }
        let (kind, arg) = spec.split_once(':').unwrap_or((spec, ""));
        let arg = arg.trim();
        let need = |what: &str| GatewayError::Config(format!("backend {kind:?} needs {what}"));
        match kind.trim() {
            "scripted" if !arg.is_empty() => Ok(Self::scripted(arg)),
            "scripted" => Err(need("a script file")),
            "replay" if !arg.is_empty() => Ok(Self::replay(arg)),
            "replay" => Err(need("a cache directory")),
            "http" if !arg.is_empty() => Ok(Self::http(arg)),
            "http" => Ok(Self::new(BackendKind::Http)),
            other => Err(GatewayError::Config(format!("unknown backend kind {other:?}"))),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::Config("temperature must be >= 0".into()));
        }
        match self.kind {
            BackendKind::Http if self.endpoint.as_deref().map_or(true, |e| e.trim().is_empty()) => {
                Err(GatewayError::Config("http backend requires an endpoint".into()))
            }
            BackendKind::Scripted if self.script.is_none() => {
                Err(GatewayError::Config("scripted backend requires a script table".into()))
            }
            BackendKind::Replay if self.cache_dir.is_none() => {
                Err(GatewayError::Config("replay backend requires cache_dir".into()))
            }
            _ => Ok(()),
        }
    }

    /// Digest of the settings that influence generated text.
    pub fn digest(&self) -> String {
        sha256_hex(generation_params(self).to_string().as_bytes())
    }
}

fn generation_params(config: &BackendConfig) -> serde_json::Value {
    json!({
        "model": config.model_name,
        "temperature": format!("{:.6}", config.temperature),
        "max_tokens": config.max_tokens,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub text: String,
    pub from_cache: bool,
    pub latency_ms: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("invalid dialogue: {0}")]
    InvalidDialogue(String),
    #[error("backend configuration error: {0}")]
    Config(String),
    #[error("backend unavailable after {attempts} attempt(s): {last}")]
    BackendUnavailable { attempts: u32, last: String },
    #[error("backend rejected the request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed backend response: {0}")]
    BadResponse(String),
    #[error("scripted backend has no entry for dialogue {digest} (last user turn: {preview:?})")]
    ScriptMiss { digest: String, preview: String },
    #[error("replay cache has no entry {0}")]
    ReplayMiss(String),
    #[error("cache i/o error: {0}")]
    Cache(#[from] std::io::Error),
}

/// Digest of the dialogue alone: roles, contents, attachments, in order.
pub fn dialogue_digest(dialogue: &ChatDialogue) -> String {
    let messages: Vec<_> = dialogue
        .messages
        .iter()
        .map(|m| json!({"role": m.role, "content": m.content, "image": m.image}))
        .collect();
    sha256_hex(serde_json::Value::Array(messages).to_string().as_bytes())
}

/// Cache key over the dialogue and the generation parameters. Transport
/// settings (endpoint, retries, cache location) do not participate.
pub fn cache_key(dialogue: &ChatDialogue, config: &BackendConfig) -> String {
    let material = json!({
        "params": generation_params(config),
        "dialogue": dialogue_digest(dialogue),
    });
    sha256_hex(material.to_string().as_bytes())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    request: serde_json::Value,
    response: CachedResponse,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CachedResponse {
    text: String,
}

fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.json"))
}

pub struct Gateway {
    config: BackendConfig,
    transport: Arc<dyn Transport>,
    script: Option<ScriptTable>,
    in_flight: Semaphore,
    backoff: BackoffPolicy,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway").field("config", &self.config).finish_non_exhaustive()
    }
}

impl Gateway {
    /// Gateway with a real HTTP client for the `http` kind; the other kinds
    /// get a transport that refuses all traffic.
    pub fn from_config(config: BackendConfig) -> Result<Self, GatewayError> {
        let transport: Arc<dyn Transport> = if config.kind == BackendKind::Http {
            let timeout = Duration::from_secs(config.request_timeout_s.max(1));
            Arc::new(ReqwestTransport::new(timeout)?)
        } else {
            Arc::new(http::NoNetwork)
        };
        Self::with_transport(config, transport)
    }

    pub fn with_transport(config: BackendConfig, transport: Arc<dyn Transport>) -> Result<Self, GatewayError> {
        config.validate()?;
        let script = match (&config.kind, &config.script) {
            (BackendKind::Scripted, Some(path)) => Some(ScriptTable::from_file(path)?),
            _ => None,
        };
        Ok(Self::assemble(config, transport, script))
    }

    /// Scripted gateway from an in-memory table.
    pub fn scripted(table: ScriptTable, cache_dir: Option<PathBuf>) -> Self {
        let mut config = BackendConfig::new(BackendKind::Scripted);
        config.script = Some(PathBuf::from("<memory>"));
        config.cache_dir = cache_dir;
        Self::assemble(config, Arc::new(http::NoNetwork), Some(table))
    }

    fn assemble(config: BackendConfig, transport: Arc<dyn Transport>, script: Option<ScriptTable>) -> Self {
        let backoff = BackoffPolicy {
            base: Duration::from_millis(config.backoff_base_ms),
            cap: Duration::from_millis(config.backoff_cap_ms),
        };
        Self {
            in_flight: Semaphore::new(config.max_in_flight),
            config,
            transport,
            script,
            backoff,
        }
    }

    pub fn config(&self) -> &BackendConfig {
        &self.config
    }

    pub fn complete(&self, dialogue: &ChatDialogue) -> Result<CompletionResult, GatewayError> {
        dialogue.validate()?;
        let started = Instant::now();
        let key = cache_key(dialogue, &self.config);
        if let Some(dir) = &self.config.cache_dir {
            if let Some(text) = read_cache(dir, &key)? {
                return Ok(CompletionResult {
                    text,
                    from_cache: true,
                    latency_ms: started.elapsed().as_millis() as u64,
                });
            }
        }
        let text = match self.config.kind {
            BackendKind::Replay => return Err(GatewayError::ReplayMiss(key)),
            BackendKind::Scripted => {
                let table = self.script.as_ref().expect("scripted gateway holds a table");
                table.lookup(dialogue)?.to_string()
            }
            BackendKind::Http => self.complete_http(dialogue)?,
        };
        if let Some(dir) = &self.config.cache_dir {
            write_cache(dir, &key, self.request_body(dialogue, false), &text)?;
        }
        Ok(CompletionResult {
            text,
            from_cache: false,
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn request_body(&self, dialogue: &ChatDialogue, inline_images: bool) -> serde_json::Value {
        let messages: Vec<_> = dialogue
            .messages
            .iter()
            .map(|m| {
                let content = match (&m.image, inline_images && self.config.supports_images) {
                    (Some(path), true) => match image_data_uri(path) {
                        Some(uri) => json!([
                            {"type": "text", "text": m.content},
                            {"type": "image_url", "image_url": {"url": uri}},
                        ]),
                        None => json!(m.content),
                    },
                    _ => json!(m.content),
                };
                json!({"role": m.role, "content": content})
            })
            .collect();
        json!({
            "model": self.config.model_name,
            "messages": messages,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_tokens,
        })
    }

    fn complete_http(&self, dialogue: &ChatDialogue) -> Result<String, GatewayError> {
        let endpoint = self.config.endpoint.as_deref().unwrap_or_default();
        let url = chat_completions_url(endpoint);
        let body = self.request_body(dialogue, true);
        let _permit = self.in_flight.acquire();
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.backoff.delay(attempt - 1));
            }
            match self.transport.post_json(&url, self.config.api_key.as_deref(), &body) {
                Ok(resp) if (200..300).contains(&resp.status) => return parse_completion(&resp.body),
                Ok(resp) if resp.status == 429 || resp.status >= 500 => {
                    last = format!("status {}", resp.status);
                    log::warn!("backend attempt {} failed: {last}", attempt + 1);
                }
                Ok(resp) => {
                    return Err(GatewayError::Rejected {
                        status: resp.status,
                        body: resp.body,
                    })
                }
                Err(e) => {
                    last = e.to_string();
                    log::warn!("backend attempt {} failed: {last}", attempt + 1);
                }
            }
        }
        Err(GatewayError::BackendUnavailable { attempts, last })
    }
}

/// One-shot completion with a gateway built from `config`.
pub fn complete(dialogue: &ChatDialogue, config: &BackendConfig) -> Result<CompletionResult, GatewayError> {
    Gateway::from_config(config.clone())?.complete(dialogue)
}

fn chat_completions_url(endpoint: &str) -> String {
    let trimmed = endpoint.trim().trim_end_matches('/');
    if trimmed.ends_with("/chat/completions") {
        trimmed.to_string()
    } else {
        format!("{trimmed}/chat/completions")
    }
}

fn parse_completion(body: &str) -> Result<String, GatewayError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| GatewayError::BadResponse(e.to_string()))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| GatewayError::BadResponse("missing choices[0].message.content".into()))
}

fn image_data_uri(path: &Path) -> Option<String> {
    use base64::Engine;
    let bytes = fs::read(path).ok()?;
    let mime = match path.extension()?.to_string_lossy().to_ascii_lowercase().as_str() {
        "png" => "image/png",
        "jpg" | "jpeg" => "image/jpeg",
        "svg" => "image/svg+xml",
        _ => return None,
    };
    Some(format!(
        "data:{mime};base64,{}",
        base64::engine::general_purpose::STANDARD.encode(bytes)
    ))
}

fn read_cache(dir: &Path, key: &str) -> Result<Option<String>, GatewayError> {
    let path = cache_path(dir, key);
    match fs::read_to_string(&path) {
        Ok(raw) => {
            let entry: CacheEntry = serde_json::from_str(&raw).map_err(|e| {
                GatewayError::Cache(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}: {e}", path.display()),
                ))
            })?;
            Ok(Some(entry.response.text))
        }
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(e.into()),
    }
}

fn write_cache(dir: &Path, key: &str, request: serde_json::Value, text: &str) -> Result<(), GatewayError> {
    let entry = CacheEntry {
        key: key.to_string(),
        request,
        response: CachedResponse { text: text.to_string() },
    };
    let bytes = serde_json::to_vec_pretty(&entry).expect("cache entry serializes");
    write_atomic(&cache_path(dir, key), &bytes)?;
    Ok(())
}
